//! Register-tiled dense products. Every product accumulates each output in
//! index order of the reduction axis without fused multiply-add, so the
//! vectorized and portable builds give identical bits.

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn body(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    let mut i = 0;
    while i + MR <= n {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let panel: Vec<[f64; MR]> = (0..k).map(|p| std::array::from_fn(|r| rows[r][p])).collect();
        let mut j = 0;
        while j + NR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            for (av, bfull) in panel.iter().zip(b.chunks_exact(m)) {
                let brow: &[f64; NR] = bfull[j..j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * brow[q];
                    }
                }
            }
            for r in 0..MR {
                let crow = &mut c[(i + r) * m + j..(i + r) * m + j + NR];
                for q in 0..NR {
                    crow[q] += acc[r][q];
                }
            }
            j += NR;
        }
        for (r, row) in rows.iter().enumerate() {
            edge_row(c, row, b, i + r, j, k, m);
        }
        i += MR;
    }
    for r in i..n {
        edge_row(c, &a[r * k..(r + 1) * k], b, r, 0, k, m);
    }
}

#[inline(always)]
fn edge_row(c: &mut [f64], arow: &[f64], b: &[f64], row: usize, from: usize, k: usize, m: usize) {
    if from >= m {
        return;
    }
    let mut acc = vec![0.0; m - from];
    for (p, &av) in arow.iter().enumerate().take(k) {
        let brow = &b[p * m + from..(p + 1) * m];
        for (s, &bv) in acc.iter_mut().zip(brow) {
            *s += av * bv;
        }
    }
    for (cv, s) in c[row * m + from..(row + 1) * m].iter_mut().zip(acc) {
        *cv += s;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn body_avx2(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    body(c, a, b, n, k, m)
}

/// `C[n x m] += A[n x k] B[k x m]`, all row-major.
pub(super) fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    debug_assert!(c.len() == n * m && a.len() == n * k && b.len() == k * m);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { body_avx2(c, a, b, n, k, m) };
            return;
        }
    }
    body(c, a, b, n, k, m)
}

/// Row-major transpose of an `r x c` matrix.
pub(super) fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `C[n x m] += A[n x k] B[m x k]^T`.
pub(super) fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    gemm_nn(c, a, &transpose(b, m, k), n, k, m)
}

/// `C[k x m] += A[n x k]^T B[n x m]`.
pub(super) fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    gemm_nn(c, &transpose(a, n, k), b, k, n, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_on_ragged_shapes() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for &(n, k, m) in &[
            (1, 1, 1),
            (3, 5, 7),
            (4, 3, 8),
            (9, 17, 23),
            (8, 432, 64),
            (5, 2, 16),
        ] {
            let a: Vec<f64> = (0..n * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * m).map(|_| next()).collect();
            let mut c = vec![0.0; n * m];
            gemm_nn(&mut c, &a, &b, n, k, m);
            assert_eq!(c, naive(&a, &b, n, k, m));
            let mut c2 = vec![0.0; n * m];
            gemm_nt(&mut c2, &a, &transpose(&b, k, m), n, k, m);
            assert_eq!(c2, c);
            let mut c3 = vec![0.0; n * m];
            gemm_tn(&mut c3, &transpose(&a, n, k), &b, k, n, m);
            assert_eq!(c3, c);
        }
    }
}
