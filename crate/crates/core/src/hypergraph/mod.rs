//! k-NN hypergraph construction, modality fusion and two-step hypergraph
//! convolution.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HydaError, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Hypergraph,
    Graph,
}

/// Binary vertex/hyperedge membership stored as adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Incidence {
    num_vertices: usize,
    members: Rc<Vec<Vec<usize>>>,
    incident: Rc<Vec<Vec<usize>>>,
}

impl Incidence {
    /// Builds from per-hyperedge member lists. Duplicate members collapse
    /// (membership is binary); empty hyperedges are rejected.
    pub fn from_members(num_vertices: usize, members: Vec<Vec<usize>>) -> Result<Self> {
        let mut incident = vec![Vec::new(); num_vertices];
        let mut clean = Vec::with_capacity(members.len());
        for (e, mut m) in members.into_iter().enumerate() {
            m.sort_unstable();
            m.dedup();
            if m.is_empty() {
                return Err(HydaError::Structure(format!("hyperedge {e} is empty")));
            }
            if let Some(&v) = m.iter().find(|&&v| v >= num_vertices) {
                return Err(HydaError::Structure(format!(
                    "hyperedge {e} references vertex {v} of {num_vertices}"
                )));
            }
            for &v in &m {
                incident[v].push(e);
            }
            clean.push(m);
        }
        Ok(Self {
            num_vertices,
            members: Rc::new(clean),
            incident: Rc::new(incident),
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_hyperedges(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, e: usize) -> &[usize] {
        &self.members[e]
    }

    pub fn incident_edges(&self, v: usize) -> &[usize] {
        &self.incident[v]
    }

    pub fn contains(&self, v: usize, e: usize) -> bool {
        self.members[e].binary_search(&v).is_ok()
    }

    pub fn vertex_degrees(&self) -> Vec<usize> {
        self.incident.iter().map(Vec::len).collect()
    }

    pub fn edge_degrees(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Dense `|V| x |E|` 0/1 matrix.
    pub fn dense(&self) -> Tensor {
        let e = self.num_hyperedges();
        let mut t = Tensor::zeros(&[self.num_vertices, e]);
        for (j, m) in self.members.iter().enumerate() {
            for &v in m {
                t.data_mut()[v * e + j] = 1.0;
            }
        }
        t
    }
}

/// Indices of the `k` nearest rows to each row under Euclidean distance.
/// The row itself always comes first; remaining ties go to the lower index.
fn nearest(x: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    if x.shape().len() != 2 {
        return Err(HydaError::shape(format!(
            "k-NN expects [N, E], got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    if k == 0 || k > n {
        return Err(HydaError::config(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.row(i);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nb = Vec::with_capacity(k);
        nb.push(i);
        nb.extend(cand.iter().take(k - 1).map(|c| c.1));
        out.push(nb);
    }
    Ok(out)
}

/// One hyperedge per vertex joining it with its `k - 1` nearest neighbours.
pub fn knn_hyperedges(x: &Tensor, k: usize) -> Result<Incidence> {
    let n = x.shape()[0];
    Incidence::from_members(n, nearest(x, k)?)
}

/// Pairwise edges `{n, neighbour}` for each of the `k` nearest vertices of
/// `n`; the vertex itself contributes a single-member self loop.
pub fn knn_graph_backend(x: &Tensor, k: usize) -> Result<Incidence> {
    let n = x.shape()[0];
    let members = nearest(x, k)?
        .into_iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.into_iter().map(move |j| vec![i, j]))
        .collect();
    Incidence::from_members(n, members)
}

pub fn build_incidence(x: &Tensor, k: usize, backend: Backend) -> Result<Incidence> {
    match backend {
        Backend::Hypergraph => knn_hyperedges(x, k),
        Backend::Graph => knn_graph_backend(x, k),
    }
}

/// Modality sub-hypergraphs concatenated over a shared vertex set.
#[derive(Debug, Clone)]
pub struct FusedHypergraph {
    pub incidence: Incidence,
    /// Hyperedge column range contributed by each modality.
    pub edge_ranges: Vec<(String, Range<usize>)>,
    /// `[N, sum E_m]` when feature blocks were supplied.
    pub node_features: Option<Tensor>,
}

impl FusedHypergraph {
    fn edge_groups(&self) -> Rc<Vec<Vec<usize>>> {
        Rc::clone(&self.incidence.members)
    }

    fn vertex_groups(&self) -> Rc<Vec<Vec<usize>>> {
        Rc::clone(&self.incidence.incident)
    }

    pub fn num_vertices(&self) -> usize {
        self.incidence.num_vertices()
    }
}

/// Concatenates modality incidences column-wise and, when given, the node
/// feature blocks along the feature axis.
pub fn fuse(parts: &[(String, Incidence)], blocks: Option<&[Tensor]>) -> Result<FusedHypergraph> {
    let n = parts
        .first()
        .ok_or_else(|| HydaError::config("fuse needs at least one modality"))?
        .1
        .num_vertices();
    let mut members = Vec::new();
    let mut ranges = Vec::with_capacity(parts.len());
    for (name, inc) in parts {
        if inc.num_vertices() != n {
            return Err(HydaError::shape(format!(
                "modality {name} has {} vertices, expected {n}",
                inc.num_vertices()
            )));
        }
        let start = members.len();
        members.extend(inc.members.iter().cloned());
        ranges.push((name.clone(), start..members.len()));
    }
    let incidence = Incidence::from_members(n, members)?;
    if let Some(v) = incidence.incident.iter().position(Vec::is_empty) {
        return Err(HydaError::Structure(format!(
            "vertex {v} belongs to no hyperedge"
        )));
    }
    let node_features = match blocks {
        None => None,
        Some(blocks) => {
            let mut width = 0;
            for b in blocks {
                if b.shape().len() != 2 || b.shape()[0] != n {
                    return Err(HydaError::shape(format!(
                        "feature block {:?} for {n} vertices",
                        b.shape()
                    )));
                }
                width += b.shape()[1];
            }
            let mut data = Vec::with_capacity(n * width);
            for v in 0..n {
                for b in blocks {
                    data.extend_from_slice(b.row(v));
                }
            }
            Some(Tensor::new(&[n, width], data)?)
        }
    };
    Ok(FusedHypergraph {
        incidence,
        edge_ranges: ranges,
        node_features,
    })
}

/// Graph handles for one learnable `[in, out]` map plus bias.
#[derive(Debug, Clone, Copy)]
pub struct HgLayer {
    pub weight: Var,
    pub bias: Var,
}

/// `act(Dv^-1 H De^-1 H^T X W + b)`: vertex features are averaged into each
/// hyperedge, hyperedge features averaged back into each vertex, then mapped.
pub fn hgconv(g: &mut Graph, hg: &FusedHypergraph, x: Var, layer: HgLayer, activate: bool) -> Result<Var> {
    let xs = g.shape(x);
    if xs.len() != 2 || xs[0] != hg.num_vertices() {
        return Err(HydaError::shape(format!(
            "hgconv input {:?} for {} vertices",
            xs,
            hg.num_vertices()
        )));
    }
    let w = g.shape(layer.weight);
    if w.len() != 2 || w[0] != xs[1] {
        return Err(HydaError::shape(format!("hgconv input {xs:?} vs weight {w:?}")));
    }
    let edges = g.mean_gather(x, hg.edge_groups())?;
    let verts = g.mean_gather(edges, hg.vertex_groups())?;
    let lin = g.matmul(verts, layer.weight)?;
    let out = g.add_row_bias(lin, layer.bias)?;
    Ok(if activate { g.relu(out) } else { out })
}

/// Softmax over the logits of a final, non-activated hypergraph convolution.
pub fn hypergraph_classify(g: &mut Graph, hg: &FusedHypergraph, f: Var, layer: HgLayer) -> Result<Var> {
    let logits = hgconv(g, hg, f, layer, false)?;
    g.softmax(logits)
}

/// Inverted dropout on every entry of `x` while training; identity otherwise.
pub fn vertex_feature_dropout<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(HydaError::config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    g.mul_const(x, mask)
}

#[cfg(test)]
mod tests;
