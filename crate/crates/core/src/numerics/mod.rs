//! Dense tensors and the reverse-mode machinery behind every trainable path.

mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck, Probe};
pub use graph::{softmax_rows, Activation, Gradients, Graph, Im2Col, Var, PROB_EPS};
pub use params::{fnv1a, BoundParams, ModelParams, ParamTensor, WeightDecayGroup};
pub use tensor::Tensor;
