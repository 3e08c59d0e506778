use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const LN2: f64 = std::f64::consts::LN_2;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rand_simplex(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut t = Tensor::from_fn(&[n, k], |_| rng.random_range(0.01..1.0));
    for r in 0..n {
        let s: f64 = t.row(r).iter().sum();
        t.data_mut()[r * k..(r + 1) * k].iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn bind_mlp(g: &mut Graph, t: &[Tensor; 4]) -> MlpLayers {
    MlpLayers {
        layer1_weight: g.param(t[0].clone()),
        layer1_bias: g.param(t[1].clone()),
        layer2_weight: g.param(t[2].clone()),
        layer2_bias: g.param(t[3].clone()),
    }
}

#[test]
fn mlp_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let b2 = rand_tensor(&mut rng, &[6]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let zero = [
        Tensor::zeros(&[6, 6]),
        Tensor::zeros(&[6]),
        Tensor::zeros(&[6, 6]),
        b2.clone(),
    ];
    let m = bind_mlp(&mut g, &zero);
    let out = mlp_encode(&mut g, xv, m).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(out).row(r), b2.data());
    }
    let eye = Tensor::from_fn(&[6, 6], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
    let ident = [eye.clone(), Tensor::zeros(&[6]), eye, Tensor::zeros(&[6])];
    let m = bind_mlp(&mut g, &ident);
    let out = mlp_encode(&mut g, xv, m).unwrap();
    let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(g.value(out).data(), relu.as_slice());
    let narrow = g.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(mlp_encode(&mut g, narrow, m), Err(HydaError::Shape(_))));
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let proj = rand_tensor(&mut rng, &[4, 6]);
    let base = [
        rand_tensor(&mut rng, &[6, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6, 6]),
        rand_tensor(&mut rng, &[6]),
    ];
    let eval = |t: &[Tensor; 4]| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let m = bind_mlp(&mut g, t);
        let o = mlp_encode(&mut g, xv, m).unwrap();
        let p = g.constant(proj.clone());
        let s = g.mul(o, p).unwrap();
        let s = g.sum(s);
        (
            g,
            s,
            [m.layer1_weight, m.layer1_bias, m.layer2_weight, m.layer2_bias],
        )
    };
    let (g, s, vars) = eval(&base);
    let grads = g.backward(s).unwrap();
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let a = grads.get(*v).unwrap();
        for i in 0..a.len() {
            let mut plus = base.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = base.clone();
            minus[k].data_mut()[i] -= h;
            let (gp, sp, _) = eval(&plus);
            let (gm, sm, _) = eval(&minus);
            let fd = (gp.value(sp).data()[0] - gm.value(sm).data()[0]) / (2.0 * h);
            let rel = (a.data()[i] - fd).abs() / a.data()[i].abs().max(1.0);
            assert!(rel < 1e-4, "param {k}[{i}]: {} vs {fd}", a.data()[i]);
        }
    }
}

#[test]
fn discriminative_head_cases() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::from_fn(&[2, 4], |i| i as f64));
    let head = DiscHead {
        weight: g.param(Tensor::zeros(&[4, 3])),
        bias: g.param(Tensor::zeros(&[3])),
    };
    let p = discriminative_classify(&mut g, f, head).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    // margin ln 3 via the bias alone
    let head = DiscHead {
        weight: g.param(Tensor::zeros(&[4, 2])),
        bias: g.param(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap()),
    };
    let p = discriminative_classify(&mut g, f, head).unwrap();
    assert!((g.value(p).data()[0] - 0.25).abs() < 1e-12);
    assert!((g.value(p).data()[1] - 0.75).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = DiscHead {
        weight: g.param(rand_tensor(&mut rng, &[4, 5])),
        bias: g.param(rand_tensor(&mut rng, &[5])),
    };
    let p = discriminative_classify(&mut g, f, head).unwrap();
    for r in 0..2 {
        assert!((g.value(p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        discriminative_classify(&mut g, bad, head),
        Err(HydaError::Shape(_))
    ));
}

fn scalar_loss(p: Tensor, y: &[usize], gamma: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let pv = g.constant(p);
    let k = g.shape(pv)[1];
    let ce = g.cross_entropy(pv, y).unwrap();
    let fl = g.focal_loss(pv, y, gamma, &vec![1.0; k]).unwrap();
    (g.value(ce).data()[0], g.value(fl).data()[0])
}

#[test]
fn loss_closed_forms() {
    let (ce, fl) = scalar_loss(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap(), &[0], 2.0);
    assert!((ce - LN2).abs() < 1e-12);
    assert!((fl - 0.25 * LN2).abs() < 1e-12);
    let (ce, _) = scalar_loss(Tensor::new(&[1, 2], vec![0.2, 0.8]).unwrap(), &[1], 2.0);
    assert!((ce - 0.223_143_551_314_209_75).abs() < 1e-12);
    let (ce, fl) = scalar_loss(
        Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        &[0, 1],
        2.0,
    );
    assert!(ce < 1e-11 && fl < 1e-11);
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
    assert!(matches!(g.cross_entropy(p, &[2]), Err(HydaError::Label(_))));
}

#[test]
fn focal_reduces_to_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(1..8);
        let k = rng.random_range(2..5);
        let p = rand_simplex(&mut rng, n, k);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (ce, fl) = scalar_loss(p, &y, 0.0);
        assert!((ce - fl).abs() < 1e-12);
    }
}

fn loss_of(p_g: &Tensor, p_d: &Tensor, y: &[usize], gamma: f64) -> LossBreakdown {
    let mut g = Graph::new();
    let a = g.constant(p_g.clone());
    let b = g.constant(p_d.clone());
    total_loss(&mut g, Some(a), Some(b), y, gamma, &vec![1.0; p_g.shape()[1]])
        .unwrap()
        .1
}

#[test]
fn total_loss_cases() {
    let uni = Tensor::full(&[3, 2], 0.5);
    let l = loss_of(&uni, &uni, &[0, 1, 1], 2.0);
    assert!((l.total - 2.5 * LN2).abs() < 1e-12);
    assert!((l.total - 1.732_868).abs() < 1e-6);

    let hot = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(loss_of(&hot, &hot, &[0, 1], 2.0).total < 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pg = rand_simplex(&mut rng, 5, 3);
    let pd = rand_simplex(&mut rng, 5, 3);
    let y = [0, 2, 1, 1, 0];
    let l = loss_of(&pg, &pd, &y, 0.0);
    assert!((l.total - 2.0 * l.ce_g - 2.0 * l.ce_d).abs() < 1e-12);
    assert!([l.ce_g, l.fl_g, l.ce_d, l.fl_d].iter().all(|&v| v >= 0.0));

    // permutation invariance over subjects
    let perm = [3, 0, 4, 2, 1];
    let permute = |t: &Tensor| {
        let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        Tensor::new(t.shape(), data).unwrap()
    };
    let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
    let lp = loss_of(&permute(&pg), &permute(&pd), &yp, 2.0);
    assert!((lp.total - loss_of(&pg, &pd, &y, 2.0).total).abs() < 1e-12);

    let mut g = Graph::new();
    let a = g.constant(pg.clone());
    let (_, single) = total_loss(&mut g, Some(a), None, &y, 2.0, &[1.0; 3]).unwrap();
    assert_eq!((single.ce_d, single.fl_d), (0.0, 0.0));
    assert!((single.total - single.ce_g - single.fl_g).abs() < 1e-15);
    assert!(total_loss(&mut g, None, None, &y, 2.0, &[1.0; 3]).is_err());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zg = rand_tensor(&mut rng, &[4, 3]);
    let zd = rand_tensor(&mut rng, &[4, 3]);
    let y = [2, 0, 1, 2];
    let eval = |zg: &Tensor, zd: &Tensor| {
        let mut g = Graph::new();
        let a = g.param(zg.clone());
        let b = g.param(zd.clone());
        let pa = g.softmax(a).unwrap();
        let pb = g.softmax(b).unwrap();
        let (t, _) = total_loss(&mut g, Some(pa), Some(pb), &y, 2.0, &[0.5, 1.0, 2.0]).unwrap();
        (g, t, a, b)
    };
    let (g, t, a, b) = eval(&zg, &zd);
    let grads = g.backward(t).unwrap();
    let (ga, gb) = (grads.get(a).unwrap(), grads.get(b).unwrap());
    let h = 1e-6;
    for i in 0..12 {
        for (which, an) in [(0, ga.data()[i]), (1, gb.data()[i])] {
            let shifted = |d: f64| {
                let (mut x, mut z) = (zg.clone(), zd.clone());
                if which == 0 {
                    x.data_mut()[i] += d;
                } else {
                    z.data_mut()[i] += d;
                }
                let (g, t, _, _) = eval(&x, &z);
                g.value(t).data()[0]
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((an - fd).abs() / an.abs().max(1.0) < 1e-4);
        }
    }
}

#[test]
fn averaging_cases() {
    let a = Tensor::new(&[1, 2], vec![0.2, 0.8]).unwrap();
    let b = Tensor::new(&[1, 2], vec![0.6, 0.4]).unwrap();
    let p = average_prediction(&a, &b).unwrap();
    assert!((p.data()[0] - 0.4).abs() < 1e-15 && (p.data()[1] - 0.6).abs() < 1e-15);
    assert_eq!(average_prediction(&a, &a).unwrap(), a);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pg = rand_simplex(&mut rng, 6, 4);
    let pd = rand_simplex(&mut rng, 6, 4);
    let pred = Prediction::new(Some(pg.clone()), Some(pd)).unwrap();
    for r in 0..6 {
        assert!((pred.p_final.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(Prediction::new(Some(pg.clone()), None).unwrap().p_final, pg);
    assert!(matches!(
        average_prediction(&a, &Tensor::zeros(&[2, 2])),
        Err(HydaError::Shape(_))
    ));
}

#[test]
fn softmax_shift_invariance_per_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = rand_tensor(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let a = g.constant(z.clone());
    let shifted = g.constant(Tensor::from_fn(&[3, 4], |i| z.data()[i] + 5.0 * (i / 4) as f64));
    let pa = g.softmax(a).unwrap();
    let pb = g.softmax(shifted).unwrap();
    assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
}

#[test]
fn focal_alpha_expansion() {
    assert_eq!(FocalAlpha::Uniform(1.0).expand(3).unwrap(), vec![1.0; 3]);
    assert_eq!(
        FocalAlpha::PerClass(vec![0.3, 0.7]).expand(2).unwrap(),
        vec![0.3, 0.7]
    );
    assert!(FocalAlpha::PerClass(vec![0.3]).expand(2).is_err());
    assert!(FocalAlpha::Uniform(-1.0).expand(2).is_err());
}
