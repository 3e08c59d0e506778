//! Multinomial logistic-regression probe used to measure how much label
//! information a block of features carries.

/// Standardized-feature softmax regression trained by full-batch gradient
/// descent.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LogisticProbe {
    pub fn fit(rows: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64, steps: usize) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2) / n as f64;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut probe = Self {
            mean,
            inv_std,
            weights: vec![0.0; d * classes],
            bias: vec![0.0; classes],
            classes,
        };
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| probe.standardize(r)).collect();
        let lr = 0.5;
        for _ in 0..steps {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.probs_std(x);
                for c in 0..classes {
                    let e = (p[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
                    gb[c] += e;
                    for j in 0..d {
                        gw[j * classes + c] += e * x[j];
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        probe
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn probs_std(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = self.bias.clone();
        for (j, &xj) in x.iter().enumerate() {
            for (c, l) in logits.iter_mut().enumerate() {
                *l += self.weights[j * self.classes + c] * xj;
            }
        }
        crate::numerics::softmax_rows(&logits, self.classes)
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(row));
        (0..self.classes)
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = rows
            .iter()
            .zip(labels)
            .filter(|(r, &y)| self.predict(r) == y)
            .count();
        hits as f64 / rows.len().max(1) as f64
    }
}
