//! Small numeric helpers shared across modules.

use ndarray::{Array1, Array2, ArrayView1};

/// Floor applied to vector norms before division.
pub const NORM_FLOOR: f64 = 1e-12;

/// L2-normalize a vector. Vectors with norm below [`NORM_FLOOR`] are scaled
/// by `1 / NORM_FLOOR` instead of producing infinities.
pub fn l2_normalize(v: &ArrayView1<f64>) -> Array1<f64> {
    let norm = v.dot(v).sqrt().max(NORM_FLOOR);
    v.mapv(|x| x / norm)
}

/// Pullback of [`l2_normalize`]: given the pre-normalization input `x` and
/// the gradient `dy` w.r.t. the normalized output, returns the gradient
/// w.r.t. `x`.
pub fn l2_normalize_vjp(x: &ArrayView1<f64>, dy: &ArrayView1<f64>) -> Array1<f64> {
    let norm = x.dot(x).sqrt().max(NORM_FLOOR);
    let y = x.mapv(|v| v / norm);
    let proj = y.dot(dy);
    (dy - &(&y * proj)) / norm
}

/// Max-subtracted log-sum-exp over a slice.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax over a slice, max-subtracted.
pub fn softmax(vals: &[f64]) -> Vec<f64> {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Orthonormalize the columns of `m` in place with modified Gram-Schmidt.
/// Requires `m` to have full column rank; returns an error-free basis for
/// the seeded random matrices used here.
pub fn orthonormalize_columns(m: &mut Array2<f64>) {
    let (rows, cols) = m.dim();
    assert!(rows >= cols, "need at least as many rows as columns");
    for j in 0..cols {
        for i in 0..j {
            let proj: f64 = (0..rows).map(|r| m[[r, i]] * m[[r, j]]).sum();
            for r in 0..rows {
                m[[r, j]] -= proj * m[[r, i]];
            }
        }
        let norm: f64 = (0..rows).map(|r| m[[r, j]] * m[[r, j]]).sum::<f64>().sqrt();
        assert!(norm > NORM_FLOOR, "rank-deficient column {j}");
        for r in 0..rows {
            m[[r, j]] /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_unit_norm() {
        let v = array![3.0, 4.0];
        let n = l2_normalize(&v.view());
        assert!((n.dot(&n) - 1.0).abs() < 1e-12);
        assert!((n[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let x = array![0.3, -1.2, 0.7, 2.0];
        let dy = array![1.0, -0.5, 0.25, 0.1];
        let grad = l2_normalize_vjp(&x.view(), &dy.view());
        let f = |x: &Array1<f64>| l2_normalize(&x.view()).dot(&dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "entry {i}: fd {fd} vs {g}", g = grad[i]);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let vals = [1000.0, 1000.0];
        let lse = log_sum_exp(&vals);
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn gram_schmidt_orthonormal() {
        let mut m = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j * 3 + 1) as f64).sin());
        orthonormalize_columns(&mut m);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..10).map(|r| m[[r, a]] * m[[r, b]]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }
}
