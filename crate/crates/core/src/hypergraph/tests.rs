use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Dense `Dv^-1 H De^-1 H^T X W + b`.
fn dense_oracle(h: &Tensor, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, e) = (h.shape()[0], h.shape()[1]);
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let hv = |v: usize, j: usize| h.data()[v * e + j];
    let dv: Vec<f64> = (0..n).map(|v| (0..e).map(|j| hv(v, j)).sum()).collect();
    let de: Vec<f64> = (0..e).map(|j| (0..n).map(|v| hv(v, j)).sum()).collect();
    // P = Dv^-1 H De^-1 H^T
    let mut p = vec![0.0; n * n];
    for a in 0..n {
        for c in 0..n {
            let mut s = 0.0;
            for j in 0..e {
                s += hv(a, j) * hv(c, j) / de[j];
            }
            p[a * n + c] = s / dv[a];
        }
    }
    let mut out = Tensor::zeros(&[n, dout]);
    for a in 0..n {
        for o in 0..dout {
            let mut s = b.data()[o];
            for c in 0..n {
                for i in 0..din {
                    s += p[a * n + c] * x.data()[c * din + i] * w.data()[i * dout + o];
                }
            }
            out.data_mut()[a * dout + o] = s;
        }
    }
    out
}

fn run_hgconv(hg: &FusedHypergraph, x: &Tensor, w: &Tensor, b: &Tensor, act: bool) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let layer = HgLayer {
        weight: g.constant(w.clone()),
        bias: g.constant(b.clone()),
    };
    let y = hgconv(&mut g, hg, xv, layer, act).unwrap();
    g.value(y).clone()
}

fn eye(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

fn single(inc: Incidence) -> FusedHypergraph {
    fuse(&[("m".into(), inc)], None).unwrap()
}

#[test]
fn knn_k1_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let inc = knn_hyperedges(&x, 1).unwrap();
    assert_eq!(inc.dense(), eye(5));
}

#[test]
fn knn_one_dimensional_example() {
    let x = Tensor::new(&[3, 1], vec![0.0, 0.1, 5.0]).unwrap();
    let inc = knn_hyperedges(&x, 2).unwrap();
    assert_eq!(inc.members(0), &[0, 1]);
    assert_eq!(inc.members(1), &[0, 1]);
    assert_eq!(inc.members(2), &[1, 2]);
    assert!(matches!(knn_hyperedges(&x, 4), Err(HydaError::Config(_))));
}

#[test]
fn knn_ties_go_to_lower_index_and_self_always_member() {
    // vertices 1 and 2 coincide with vertex 0
    let x = Tensor::new(&[4, 1], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    let inc = knn_hyperedges(&x, 2).unwrap();
    assert_eq!(inc.members(2), &[0, 2]);
    assert_eq!(inc.members(3), &[0, 3]);
    for v in 0..4 {
        assert!(inc.contains(v, v));
    }
}

#[test]
fn fuse_counts_and_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 190;
    let blocks: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[n, 4])).collect();
    let parts: Vec<(String, Incidence)> = ["mri", "pet", "tabular"]
        .iter()
        .zip(&blocks)
        .map(|(name, b)| (name.to_string(), knn_hyperedges(b, 20).unwrap()))
        .collect();
    let hg = fuse(&parts, Some(&blocks)).unwrap();
    assert_eq!(hg.incidence.num_hyperedges(), 570);
    assert!(hg.incidence.vertex_degrees().iter().all(|&d| d >= 3));
    assert!(hg.incidence.edge_degrees().iter().all(|&d| d == 20));
    assert_eq!(hg.node_features.as_ref().unwrap().shape(), &[n, 12]);
    let mut covered = vec![0; 570];
    for (_, r) in &hg.edge_ranges {
        r.clone().for_each(|e| covered[e] += 1);
    }
    assert!(covered.iter().all(|&c| c == 1));
    for (m, (_, r)) in hg.edge_ranges.iter().enumerate() {
        for v in 0..n {
            assert!(hg.incidence.contains(v, r.start + v), "modality {m} vertex {v}");
        }
    }

    let one = fuse(&parts[..1], None).unwrap();
    assert_eq!(one.incidence, parts[0].1);

    let small = knn_hyperedges(&rand_tensor(&mut rng, &[5, 2]), 2).unwrap();
    let bad = vec![parts[0].clone(), ("x".into(), small)];
    assert!(matches!(fuse(&bad, None), Err(HydaError::Shape(_))));
}

#[test]
fn hgconv_trivial_cases() {
    let x = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let hg = single(Incidence::from_members(1, vec![vec![0]]).unwrap());
    assert_eq!(run_hgconv(&hg, &x, &eye(3), &Tensor::zeros(&[3]), false), x);

    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let hg = single(Incidence::from_members(2, vec![vec![0, 1]]).unwrap());
    let y = run_hgconv(&hg, &x, &eye(2), &Tensor::zeros(&[2]), false);
    assert_eq!(y.data(), &[2.0, 4.0, 2.0, 4.0]);
}

#[test]
fn hgconv_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=3);
        let parts: Vec<(String, Incidence)> = (0..m)
            .map(|i| {
                let k = rng.random_range(1..=n);
                let block = rand_tensor(&mut rng, &[n, 3]);
                (format!("m{i}"), knn_hyperedges(&block, k).unwrap())
            })
            .collect();
        let hg = fuse(&parts, None).unwrap();
        let (din, dout) = (rng.random_range(1..5), rng.random_range(1..5));
        let x = rand_tensor(&mut rng, &[n, din]);
        let w = rand_tensor(&mut rng, &[din, dout]);
        let b = rand_tensor(&mut rng, &[dout]);
        let got = run_hgconv(&hg, &x, &w, &b, false);
        let want = dense_oracle(&hg.incidence.dense(), &x, &w, &b);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn classifier_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[6, 4]);
    let hg = single(knn_hyperedges(&x, 3).unwrap());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let zero = HgLayer {
        weight: g.constant(Tensor::zeros(&[4, 3])),
        bias: g.constant(Tensor::zeros(&[3])),
    };
    let p = hypergraph_classify(&mut g, &hg, xv, zero).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let rl = HgLayer {
        weight: g.constant(rand_tensor(&mut rng, &[4, 3])),
        bias: g.constant(rand_tensor(&mut rng, &[3])),
    };
    let p = hypergraph_classify(&mut g, &hg, xv, rl).unwrap();
    for row in g.value(p).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // single self-loop vertex reduces to softmax(x W + b)
    let x1 = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
    let hg1 = single(Incidence::from_members(1, vec![vec![0]]).unwrap());
    let w = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap();
    let b = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x1);
    let layer = HgLayer {
        weight: g.constant(w),
        bias: g.constant(b),
    };
    let p = hypergraph_classify(&mut g, &hg1, xv, layer).unwrap();
    let logits = [0.3 * 1.0 - 0.7 * 0.5 + 0.1, 0.3 * -2.0 - 0.7 * 0.25 + 0.2];
    assert_eq!(g.value(p).data(), softmax_ref(&logits).as_slice());
}

fn softmax_ref(l: &[f64]) -> Vec<f64> {
    crate::numerics::softmax_rows(l, l.len())
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[3, 3]));
    assert_eq!(vertex_feature_dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(
        vertex_feature_dropout(&mut g, x, 0.5, false, &mut rng).unwrap(),
        x
    );
    assert!(vertex_feature_dropout(&mut g, x, 1.0, true, &mut rng).is_err());
}

#[test]
fn dropout_keep_rate_and_unbiased_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let n = 100 * 100;
    let x = g.constant(Tensor::full(&[100, 100], 2.0));
    let y = vertex_feature_dropout(&mut g, x, 0.5, true, &mut rng).unwrap();
    let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.5).abs() < 0.01, "keep rate {kept}");
    let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
    assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
}

#[test]
fn graph_backend_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 2]);
    let inc = knn_graph_backend(&x, 1).unwrap();
    assert_eq!(inc.num_hyperedges(), 5);
    assert!(inc.edge_degrees().iter().all(|&d| d == 1));
    let hg = single(inc);
    let w = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let y = run_hgconv(&hg, &x, &w, &b, false);
    for v in 0..5 {
        for o in 0..3 {
            let lin = b.data()[o] + x.row(v)[0] * w.data()[o] + x.row(v)[1] * w.data()[3 + o];
            assert!((y.row(v)[o] - lin).abs() < 1e-12);
        }
    }

    let k3 = knn_graph_backend(&x, 3).unwrap();
    let deg = k3.edge_degrees();
    for e in 0..k3.num_hyperedges() {
        let m = k3.members(e);
        assert_eq!(deg[e], if m.len() == 1 { 1 } else { 2 });
    }
}

#[test]
fn line_graph_middle_vertex() {
    // edges {0,1} and {1,2}: vertex 1 averages the two edge means
    let inc = Incidence::from_members(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
    let hg = single(inc);
    let x = Tensor::new(&[3, 1], vec![0.0, 2.0, 10.0]).unwrap();
    let y = run_hgconv(&hg, &x, &eye(1), &Tensor::zeros(&[1]), false);
    assert_eq!(y.data()[1], (1.0 + 6.0) / 2.0);
}

#[test]
fn permutation_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 9;
    let blocks: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[n, 3])).collect();
    let w = rand_tensor(&mut rng, &[6, 2]);
    let b = rand_tensor(&mut rng, &[2]);
    let run = |blocks: &[Tensor]| {
        let parts: Vec<(String, Incidence)> = blocks
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("m{i}"), knn_hyperedges(t, 3).unwrap()))
            .collect();
        let hg = fuse(&parts, Some(blocks)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(hg.node_features.clone().unwrap());
        let layer = HgLayer {
            weight: g.constant(w.clone()),
            bias: g.constant(b.clone()),
        };
        let p = hypergraph_classify(&mut g, &hg, xv, layer).unwrap();
        g.value(p).clone()
    };
    let base = run(&blocks);
    let perm: Vec<usize> = vec![4, 0, 8, 2, 6, 1, 3, 7, 5];
    let permuted: Vec<Tensor> = blocks
        .iter()
        .map(|t| Tensor::new(&[n, 3], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap())
        .collect();
    let out = run(&permuted);
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..2 {
            assert!((out.row(r)[c] - base.row(i)[c]).abs() < 1e-12);
        }
    }
}
