//! Shared raw numeric kernels over row-major `f64` slices.
//!
//! Both the autodiff tape and the gradient-free evaluation path call into the
//! same functions here, so forward values agree bitwise between the two
//! routes (the floating-point operation order is identical by construction).

/// `out[m,n] = a[m,k] . b[k,n]`, i-k-j loop order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m,p] = a[m,n] . b[p,n]^T` — row-dot-row, used for `dA = G . B^T`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for q in 0..p {
            let b_row = &b[q * n..(q + 1) * n];
            out[i * p + q] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out[k,n] += a[m,k]^T . b[m,n]` — used for `dB += A^T . G`. Accumulates.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Add `row[n]` to every row of `x[t,n]` in place.
pub fn add_row_inplace(x: &mut [f64], row: &[f64], t: usize, n: usize) {
    debug_assert_eq!(x.len(), t * n);
    debug_assert_eq!(row.len(), n);
    for r in 0..t {
        for (xv, rv) in x[r * n..(r + 1) * n].iter_mut().zip(row) {
            *xv += rv;
        }
    }
}

/// Per-row layer normalization with optional gain/bias.
/// `out[r] = (x[r] - mean) / sqrt(var + eps) * gain + bias`
/// where `var` is the population variance of the row.
pub fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    d: usize,
    eps: f64,
    gain: Option<&[f64]>,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), rows * d);
    debug_assert_eq!(out.len(), rows * d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let (mean, inv_std) = row_mean_inv_std(row, eps);
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let mut v = (row[j] - mean) * inv_std;
            if let Some(g) = gain {
                v *= g[j];
            }
            if let Some(b) = bias {
                v += b[j];
            }
            o[j] = v;
        }
    }
}

/// Mean and `1/sqrt(var + eps)` of one row (population variance).
pub fn row_mean_inv_std(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Max-stabilized row-wise softmax of `x / temperature`.
///
/// With `causal` set, `x` must be square (`rows == cols`) and row `r` only
/// distributes mass over columns `0..=r`; the rest become exactly zero.
pub fn softmax_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    temperature: f64,
    causal: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    debug_assert!(temperature > 0.0);
    for r in 0..rows {
        let limit = if causal { r + 1 } else { cols };
        let row = &x[r * cols..r * cols + limit];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for j in 0..limit {
            let e = ((row[j] - max) / temperature).exp();
            o[j] = e;
            sum += e;
        }
        for v in o[..limit].iter_mut() {
            *v /= sum;
        }
        for v in o[limit..].iter_mut() {
            *v = 0.0;
        }
    }
}

/// Smooth GELU (tanh approximation), matching common transformer stacks.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `ln(sum(exp(x)))`, max-stabilized.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of `x / temperature` into `out`.
pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize, temperature: f64, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max / temperature
            + row
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
        for j in 0..cols {
            out[r * cols + j] = row[j] / temperature - lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &[n as u64]);
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let (m, k, n) = (4, 5, 3);
        let a = random_vec(m * k, 1);
        let b = random_vec(k * n, 2);
        let mut out = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut expect = 0.0;
                for p in 0..k {
                    expect += a[i * k + p] * b[p * n + j];
                }
                assert!((out[i * n + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_is_transpose_product() {
        let (m, n, p) = (3, 4, 2);
        let a = random_vec(m * n, 3);
        let b = random_vec(p * n, 4);
        let mut got = vec![0.0; m * p];
        matmul_nt(&a, &b, m, n, p, &mut got);
        // Oracle: explicitly transpose b then use the naive product.
        let mut bt = vec![0.0; n * p];
        for q in 0..p {
            for j in 0..n {
                bt[j * p + q] = b[q * n + j];
            }
        }
        let mut expect = vec![0.0; m * p];
        matmul(&a, &bt, m, n, p, &mut expect);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tn_acc_is_transpose_product_and_accumulates() {
        let (m, k, n) = (3, 4, 2);
        let a = random_vec(m * k, 5);
        let b = random_vec(m * n, 6);
        let mut got = vec![1.0; k * n]; // pre-filled: must accumulate on top
        matmul_tn_acc(&a, &b, m, k, n, &mut got);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut expect = vec![0.0; k * n];
        matmul(&at, &b, k, m, n, &mut expect);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - (e + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_zeroes_future_and_rows_sum_to_one() {
        let t = 4;
        let x = random_vec(t * t, 7);
        let mut out = vec![0.0; t * t];
        softmax_rows(&x, t, t, 1.0, true, &mut out);
        for r in 0..t {
            for c in r + 1..t {
                assert_eq!(out[r * t + c], 0.0);
            }
            let sum: f64 = out[r * t..(r + 1) * t].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // First row is a point mass on the only visible column.
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let x = random_vec(12, 8);
        let mut soft = vec![0.0; 12];
        softmax_rows(&x, 3, 4, 2.0, false, &mut soft);
        let mut ls = vec![0.0; 12];
        log_softmax_rows(&x, 3, 4, 2.0, &mut ls);
        for (s, l) in soft.iter().zip(&ls) {
            assert!((s.ln() - l).abs() < 1e-10);
        }
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        let x = [1000.0, 1000.0];
        let got = log_sum_exp(&x);
        assert!((got - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let h = 1e-6;
        for x in [-3.0, -1.0, -0.1, 0.0, 0.1, 0.5, 2.0] {
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let analytic = gelu_grad(x);
            assert!(
                (numeric - analytic).abs() < 1e-8,
                "x={x}: {analytic} vs {numeric}"
            );
        }
        // Known anchor values: gelu(0) = 0, gelu is ~x for large x.
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
    }
}
