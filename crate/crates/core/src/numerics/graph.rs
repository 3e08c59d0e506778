//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use std::rc::Rc;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{shape_mismatch, HydaError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Sum(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Act(Var, Activation),
    Softmax(Var),
    PointwiseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3dSame {
        x: Var,
        w: Var,
    },
    Conv3dCols {
        cols: Rc<Vec<f64>>,
        kr: usize,
        s: usize,
        w: Var,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    SwapAxes01(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    ChannelScale {
        x: Var,
        gate: Var,
    },
    SelectRow(Var, usize),
    MeanGather {
        x: Var,
        groups: Rc<Vec<Vec<usize>>>,
    },
    FocalLoss {
        p: Var,
        labels: Rc<Vec<usize>>,
        gamma: f64,
        alpha: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Column matrix of a constant `[1, C, D, H, W]` volume for repeated 3x3x3
/// "same" convolutions.
#[derive(Debug, Clone)]
pub struct Im2Col {
    cols: Rc<Vec<f64>>,
    shape: [usize; 4],
}

impl Im2Col {
    pub fn new(x: &Tensor) -> Result<Self> {
        let xs = x.shape();
        if xs.len() != 5 || xs[0] != 1 {
            return Err(HydaError::shape(format!(
                "im2col expects [1, C, D, H, W], got {xs:?}"
            )));
        }
        let shape = [xs[1], xs[2], xs[3], xs[4]];
        let cols = im2col3(x.data(), shape[0], shape[1], shape[2], shape[3]);
        Ok(Self {
            cols: Rc::new(cols),
            shape,
        })
    }

    /// `[C, D, H, W]` of the source volume.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
}

/// Probability clamp applied before logarithms in the loss ops.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Gathers the 27 shifted copies of each input channel so a 3x3x3
/// "same" convolution becomes a matrix product over rows `(ci, kd, kh, kw)`.
fn im2col3(x: &[f64], cin: usize, d: usize, h: usize, w: usize) -> Vec<f64> {
    let s = d * h * w;
    let mut cols = vec![0.0; cin * 27 * s];
    for ci in 0..cin {
        let xc = &x[ci * s..(ci + 1) * s];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let r = ci * 27 + kd * 9 + kh * 3 + kw;
                    let row = &mut cols[r * s..(r + 1) * s];
                    for od in 0..d {
                        let id = od + kd;
                        if id < 1 || id > d {
                            continue;
                        }
                        let id = id - 1;
                        for oh in 0..h {
                            let ih = oh + kh;
                            if ih < 1 || ih > h {
                                continue;
                            }
                            let ih = ih - 1;
                            let lo = if kw == 0 { 1 } else { 0 };
                            let hi = if kw == 2 { w - 1 } else { w };
                            let dst = &mut row[(od * h + oh) * w..(od * h + oh + 1) * w];
                            let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            for ow in lo..hi {
                                dst[ow] = src[ow + kw - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
fn col2im3(cols: &[f64], cin: usize, d: usize, h: usize, w: usize, dx: &mut [f64]) {
    let s = d * h * w;
    for ci in 0..cin {
        let xc = &mut dx[ci * s..(ci + 1) * s];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let r = ci * 27 + kd * 9 + kh * 3 + kw;
                    let row = &cols[r * s..(r + 1) * s];
                    for od in 0..d {
                        let id = od + kd;
                        if id < 1 || id > d {
                            continue;
                        }
                        let id = id - 1;
                        for oh in 0..h {
                            let ih = oh + kh;
                            if ih < 1 || ih > h {
                                continue;
                            }
                            let ih = ih - 1;
                            let lo = if kw == 0 { 1 } else { 0 };
                            let hi = if kw == 2 { w - 1 } else { w };
                            let src = &row[(od * h + oh) * w..(od * h + oh + 1) * w];
                            let dst = &mut xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            for ow in lo..hi {
                                dst[ow + kw - 1] += src[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * c);
        self.push(out, self.rg(&[a]), Op::Scale(a, c))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(HydaError::shape(format!(
                "mask length {} vs tensor {:?}",
                mask.len(),
                t.shape()
            )));
        }
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * mask[i]);
        Ok(self.push(out, self.rg(&[a]), Op::MulConst(a, Rc::new(mask))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), self.rg(&[a]), Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm_nn(&mut out, ta.data(), tb.data(), n, k, m);
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::MatMul(a, b)))
    }

    /// `[N, D] + [D]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.shape() != [ta.shape()[1]] {
            return Err(shape_mismatch("add_row_bias", ta.shape(), tb.shape()));
        }
        let d = ta.shape()[1];
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + tb.data()[i % d]);
        Ok(self.push(out, self.rg(&[a, bias]), Op::AddRowBias(a, bias)))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a);
        let out = match kind {
            Activation::Relu => Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0)),
            Activation::Sigmoid => Tensor::from_fn(t.shape(), |i| sigmoid(t.data()[i])),
        };
        self.push(out, self.rg(&[a]), Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Row-wise softmax of a `[B, K]` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.shape()[1] < 2 {
            return Err(HydaError::shape(format!(
                "softmax expects [B, K>=2], got {:?}",
                t.shape()
            )));
        }
        let out = Tensor::new(t.shape(), softmax_rows(t.data(), t.shape()[1]))?;
        Ok(self.push(out, self.rg(&[a]), Op::Softmax(a)))
    }

    /// 1x1x1 convolution: `x [B, Cin, ...]`, `w [Cout, Cin]`, `b [Cout]`.
    pub fn pointwise_conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() < 2 || tw.shape().len() != 2 || tw.shape()[1] != tx.shape()[1] {
            return Err(shape_mismatch("pointwise_conv3d", tx.shape(), tw.shape()));
        }
        let (bsz, cin, cout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let s = spatial(tx.shape());
        let bias = match b {
            Some(bv) => {
                let tb = self.value(bv);
                if tb.shape() != [cout] {
                    return Err(shape_mismatch("pointwise_conv3d bias", tb.shape(), &[cout]));
                }
                Some(tb.data())
            }
            None => None,
        };
        let mut out = vec![0.0; bsz * cout * s];
        for bi in 0..bsz {
            let xb = &tx.data()[bi * cin * s..(bi + 1) * cin * s];
            let ob = &mut out[bi * cout * s..(bi + 1) * cout * s];
            if let Some(bd) = bias {
                for (o, orow) in ob.chunks_mut(s).enumerate() {
                    orow.fill(bd[o]);
                }
            }
            gemm_nn(ob, tw.data(), xb, cout, cin, s);
        }
        let mut shape = tx.shape().to_vec();
        shape[1] = cout;
        let out = Tensor::new(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, rg, Op::PointwiseConv { x, w, b }))
    }

    /// 3x3x3 cross-correlation, zero padding 1, stride 1.
    pub fn conv3d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.len() != 5 || xs[0] != 1 {
            return Err(HydaError::shape(format!(
                "conv3d_same expects input [1, C, D, H, W], got {xs:?}"
            )));
        }
        if ws.len() != 5 || ws[2..] != [3, 3, 3] || ws[1] != xs[1] {
            return Err(shape_mismatch("conv3d_same kernel", ws, xs));
        }
        let (cin, d, h, wd) = (xs[1], xs[2], xs[3], xs[4]);
        let cout = ws[0];
        let s = d * h * wd;
        let cols = im2col3(tx.data(), cin, d, h, wd);
        let mut out = vec![0.0; cout * s];
        gemm_nn(&mut out, tw.data(), &cols, cout, cin * 27, s);
        let out = Tensor::new(&[1, cout, d, h, wd], out)?;
        Ok(self.push(out, self.rg(&[x, w]), Op::Conv3dSame { x, w }))
    }

    /// [`Graph::conv3d_same`] on a constant volume whose columns were
    /// gathered once up front. Only the kernel receives a gradient.
    pub fn conv3d_cols(&mut self, cols: &Im2Col, w: Var) -> Result<Var> {
        let tw = self.value(w);
        let [cin, d, h, wd] = cols.shape;
        let ws = tw.shape();
        if ws.len() != 5 || ws[2..] != [3, 3, 3] || ws[1] != cin {
            return Err(shape_mismatch("conv3d_cols kernel", ws, &[1, cin, d, h, wd]));
        }
        let (cout, s, kr) = (ws[0], d * h * wd, cin * 27);
        let mut out = vec![0.0; cout * s];
        gemm_nn(&mut out, tw.data(), &cols.cols, cout, kr, s);
        let out = Tensor::new(&[1, cout, d, h, wd], out)?;
        let op = Op::Conv3dCols {
            cols: Rc::clone(&cols.cols),
            kr,
            s,
            w,
        };
        Ok(self.push(out, self.rg(&[w]), op))
    }

    /// Per-channel spatial mean: `[B, C, ...] -> [B, C, 1, ..., 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 3 {
            return Err(HydaError::shape(format!(
                "global_avg_pool expects rank >= 3, got {:?}",
                t.shape()
            )));
        }
        let s = spatial(t.shape());
        let bc = t.shape()[0] * t.shape()[1];
        let data = (0..bc)
            .map(|i| t.data()[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64)
            .collect();
        let mut shape = t.shape().to_vec();
        shape[2..].fill(1);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, self.rg(&[x]), Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(new_shape)?;
        Ok(self.push(out, self.rg(&[x]), Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[1, n])
    }

    /// `[A, B, rest...] -> [B, A, rest...]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(HydaError::shape(format!(
                "swap_axes01 expects rank >= 2, got {:?}",
                t.shape()
            )));
        }
        let (a, b) = (t.shape()[0], t.shape()[1]);
        let r = spatial(t.shape());
        let mut out = vec![0.0; t.len()];
        for i in 0..a {
            for j in 0..b {
                out[(j * a + i) * r..(j * a + i + 1) * r]
                    .copy_from_slice(&t.data()[(i * b + j) * r..(i * b + j + 1) * r]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.swap(0, 1);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, self.rg(&[x]), Op::SwapAxes01(x)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| HydaError::shape("concat of nothing"))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(HydaError::shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_mismatch("concat", s, &first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block: usize = t.shape()[axis..].iter().product();
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `x [B, C, ...] * gate [B, C, 1, ...]`, broadcast over spatial positions.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gate));
        let xs = tx.shape();
        if xs.len() < 3 || tg.shape()[..2] != xs[..2] || tg.len() != xs[0] * xs[1] {
            return Err(shape_mismatch("channel_scale", xs, tg.shape()));
        }
        let s = spatial(xs);
        let out = Tensor::from_fn(xs, |i| tx.data()[i] * tg.data()[i / s]);
        Ok(self.push(out, self.rg(&[x, gate]), Op::ChannelScale { x, gate }))
    }

    /// Row `i` of `[N, D]` as `[1, D]`.
    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || i >= t.shape()[0] {
            return Err(HydaError::shape(format!("select_row {i} from {:?}", t.shape())));
        }
        let out = Tensor::new(&[1, t.shape()[1]], t.row(i).to_vec())?;
        Ok(self.push(out, self.rg(&[x]), Op::SelectRow(x, i)))
    }

    /// Output row `g` is the mean of the input rows listed in `groups[g]`.
    pub fn mean_gather(&mut self, x: Var, groups: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(HydaError::shape(format!(
                "mean_gather expects [N, D], got {:?}",
                t.shape()
            )));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(HydaError::Structure(format!("group {g} has no members")));
            }
            let orow = &mut out[g * d..(g + 1) * d];
            for &m in members {
                if m >= n {
                    return Err(HydaError::Structure(format!(
                        "group {g} references row {m} of {n}"
                    )));
                }
                axpy(orow, 1.0, t.row(m));
            }
            let inv = 1.0 / members.len() as f64;
            orow.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(&[groups.len(), d], out)?;
        Ok(self.push(out, self.rg(&[x]), Op::MeanGather { x, groups }))
    }

    /// `-(1/N) sum_n alpha[y_n] (1 - p[n, y_n])^gamma log p[n, y_n]` with the
    /// probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn focal_loss(&mut self, p: Var, labels: &[usize], gamma: f64, alpha: &[f64]) -> Result<Var> {
        let t = self.value(p);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(HydaError::shape(format!(
                "loss expects [N, K] with N = {} labels, got {:?}",
                labels.len(),
                t.shape()
            )));
        }
        let k = t.shape()[1];
        if alpha.len() != k {
            return Err(HydaError::config(format!(
                "alpha has {} entries for {k} classes",
                alpha.len()
            )));
        }
        if gamma < 0.0 {
            return Err(HydaError::config(format!("focal gamma {gamma} < 0")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(HydaError::Label(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let n = labels.len() as f64;
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let pt = t.data()[i * k + y].clamp(PROB_EPS, 1.0 - PROB_EPS);
                -alpha[y] * (1.0 - pt).powf(gamma) * pt.ln()
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            self.rg(&[p]),
            Op::FocalLoss {
                p,
                labels: Rc::new(labels.to_vec()),
                gamma,
                alpha: Rc::new(alpha.to_vec()),
            },
        ))
    }

    /// Cross-entropy: the focal loss with `gamma = 0` and unit class weights.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let k = self.shape(p).get(1).copied().unwrap_or(0);
        self.focal_loss(p, labels, 0.0, &vec![1.0; k])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(HydaError::shape(format!(
                "backward from non-scalar of shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &node.op, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let check = |v: Var| -> Result<()> {
            if v.0 >= idx {
                return Err(HydaError::Structure(format!(
                    "node {idx} depends on later node {}",
                    v.0
                )));
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    check(v)?;
                    if wants(v) {
                        axpy(accumulate(&mut grads[v.0], g.len()), 1.0, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                check(*a)?;
                check(*b)?;
                if wants(*a) {
                    let gb = val(*b).data();
                    let acc = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * gb[i];
                    }
                }
                if wants(*b) {
                    let ga = val(*a).data();
                    let acc = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * ga[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                check(*a)?;
                axpy(accumulate(&mut grads[a.0], g.len()), *c, g);
            }
            Op::MulConst(a, mask) => {
                check(*a)?;
                let acc = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * mask[i];
                }
            }
            Op::Sum(a) => {
                check(*a)?;
                let n = val(*a).len();
                accumulate(&mut grads[a.0], n).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::MatMul(a, b) => {
                check(*a)?;
                check(*b)?;
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    gemm_nt(accumulate(&mut grads[a.0], n * k), g, tb.data(), n, m, k);
                }
                if wants(*b) {
                    gemm_tn(accumulate(&mut grads[b.0], k * m), ta.data(), g, n, k, m);
                }
            }
            Op::AddRowBias(a, b) => {
                check(*a)?;
                check(*b)?;
                if wants(*a) {
                    axpy(accumulate(&mut grads[a.0], g.len()), 1.0, g);
                }
                if wants(*b) {
                    let d = val(*b).len();
                    let acc = accumulate(&mut grads[b.0], d);
                    for row in g.chunks(d) {
                        axpy(acc, 1.0, row);
                    }
                }
            }
            Op::Act(a, kind) => {
                check(*a)?;
                let x = val(*a).data();
                let y = out.data();
                let acc = accumulate(&mut grads[a.0], g.len());
                match kind {
                    Activation::Relu => {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                acc[i] += g[i];
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for i in 0..g.len() {
                            acc[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                check(*a)?;
                let k = out.shape()[1];
                let acc = accumulate(&mut grads[a.0], g.len());
                for (r, (yrow, grow)) in out.data().chunks(k).zip(g.chunks(k)).enumerate() {
                    let s = dot(yrow, grow);
                    for j in 0..k {
                        acc[r * k + j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::PointwiseConv { x, w, b } => {
                check(*x)?;
                check(*w)?;
                let (tx, tw) = (val(*x), val(*w));
                let (bsz, cin, cout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                let s = spatial(tx.shape());
                if wants(*x) {
                    let acc = accumulate(&mut grads[x.0], tx.len());
                    for bi in 0..bsz {
                        let gb = &g[bi * cout * s..(bi + 1) * cout * s];
                        gemm_tn(
                            &mut acc[bi * cin * s..(bi + 1) * cin * s],
                            tw.data(),
                            gb,
                            cout,
                            cin,
                            s,
                        );
                    }
                }
                if wants(*w) {
                    let acc = accumulate(&mut grads[w.0], tw.len());
                    for bi in 0..bsz {
                        let gb = &g[bi * cout * s..(bi + 1) * cout * s];
                        let xb = &tx.data()[bi * cin * s..(bi + 1) * cin * s];
                        gemm_nt(acc, gb, xb, cout, s, cin);
                    }
                }
                if let Some(b) = b {
                    check(*b)?;
                    if wants(*b) {
                        let acc = accumulate(&mut grads[b.0], cout);
                        for bi in 0..bsz {
                            for (o, slot) in acc.iter_mut().enumerate() {
                                *slot += g[(bi * cout + o) * s..(bi * cout + o + 1) * s]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::Conv3dSame { x, w } => {
                check(*x)?;
                check(*w)?;
                let (tx, tw) = (val(*x), val(*w));
                let xs = tx.shape();
                let (cin, d, h, wd) = (xs[1], xs[2], xs[3], xs[4]);
                let cout = tw.shape()[0];
                let s = d * h * wd;
                let kr = cin * 27;
                if wants(*w) {
                    let cols = im2col3(tx.data(), cin, d, h, wd);
                    gemm_nt(accumulate(&mut grads[w.0], tw.len()), g, &cols, cout, s, kr);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; kr * s];
                    gemm_tn(&mut dcols, tw.data(), g, cout, kr, s);
                    let acc = accumulate(&mut grads[x.0], tx.len());
                    col2im3(&dcols, cin, d, h, wd, acc);
                }
            }
            Op::Conv3dCols { cols, kr, s, w } => {
                check(*w)?;
                if wants(*w) {
                    let cout = val(*w).shape()[0];
                    gemm_nt(accumulate(&mut grads[w.0], cout * kr), g, cols, cout, *s, *kr);
                }
            }
            Op::GlobalAvgPool(a) => {
                check(*a)?;
                let s = spatial(val(*a).shape());
                let n = val(*a).len();
                let acc = accumulate(&mut grads[a.0], n);
                for (i, slot) in acc.iter_mut().enumerate() {
                    *slot += g[i / s] / s as f64;
                }
            }
            Op::Reshape(a) => {
                check(*a)?;
                axpy(accumulate(&mut grads[a.0], g.len()), 1.0, g);
            }
            Op::SwapAxes01(a) => {
                check(*a)?;
                let ts = val(*a).shape();
                let (a0, b0) = (ts[0], ts[1]);
                let r = spatial(ts);
                let acc = accumulate(&mut grads[a.0], g.len());
                for i in 0..a0 {
                    for j in 0..b0 {
                        axpy(
                            &mut acc[(i * b0 + j) * r..(i * b0 + j + 1) * r],
                            1.0,
                            &g[(j * a0 + i) * r..(j * a0 + i + 1) * r],
                        );
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let mut offset = 0;
                let out_block: usize = out.shape()[*axis..].iter().product();
                for &p in parts {
                    check(p)?;
                    let t = val(p);
                    let block: usize = t.shape()[*axis..].iter().product();
                    if wants(p) {
                        let acc = accumulate(&mut grads[p.0], t.len());
                        for o in 0..outer {
                            let src = &g[o * out_block + offset..o * out_block + offset + block];
                            axpy(&mut acc[o * block..(o + 1) * block], 1.0, src);
                        }
                    }
                    offset += block;
                }
            }
            Op::ChannelScale { x, gate } => {
                check(*x)?;
                check(*gate)?;
                let (tx, tg) = (val(*x), val(*gate));
                let s = spatial(tx.shape());
                if wants(*x) {
                    let acc = accumulate(&mut grads[x.0], tx.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * tg.data()[i / s];
                    }
                }
                if wants(*gate) {
                    let acc = accumulate(&mut grads[gate.0], tg.len());
                    for (c, slot) in acc.iter_mut().enumerate() {
                        *slot += dot(&g[c * s..(c + 1) * s], &tx.data()[c * s..(c + 1) * s]);
                    }
                }
            }
            Op::SelectRow(a, i) => {
                check(*a)?;
                let t = val(*a);
                let d = t.shape()[1];
                let acc = accumulate(&mut grads[a.0], t.len());
                axpy(&mut acc[i * d..(i + 1) * d], 1.0, g);
            }
            Op::MeanGather { x, groups } => {
                check(*x)?;
                let t = val(*x);
                let d = t.shape()[1];
                let acc = accumulate(&mut grads[x.0], t.len());
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    let grow = &g[gi * d..(gi + 1) * d];
                    for &m in members {
                        axpy(&mut acc[m * d..(m + 1) * d], inv, grow);
                    }
                }
            }
            Op::FocalLoss {
                p,
                labels,
                gamma,
                alpha,
            } => {
                check(*p)?;
                let t = val(*p);
                let k = t.shape()[1];
                let n = labels.len() as f64;
                let acc = accumulate(&mut grads[p.0], t.len());
                for (i, &y) in labels.iter().enumerate() {
                    let raw = t.data()[i * k + y];
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                        continue;
                    }
                    let q = 1.0 - raw;
                    let mut d = q.powf(*gamma) / raw;
                    if *gamma != 0.0 {
                        d -= gamma * q.powf(gamma - 1.0) * raw.ln();
                    }
                    acc[i * k + y] += -g[0] * alpha[y] * d / n;
                }
            }
        }
        Ok(())
    }
}

/// Max-subtracted row softmax over rows of width `k`.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}
