//! Tolerances and small numerical helpers shared across modules.

use nalgebra::{DMatrix, SymmetricEigen};

/// Absolute tolerance for internal invariant checks.
pub const INVARIANT_TOL: f64 = 1e-12;

/// Absolute tolerance for user-facing equality of weights.
pub const EQ_TOL: f64 = 1e-9;

/// Probability vectors whose mass is off by less than this are renormalized;
/// larger deviations are rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// Smallest eigenvalue tolerated for a Gram matrix to count as PSD.
pub const PSD_TOL: f64 = -1e-9;

/// Radicands of squared discrepancies in `[-MMD_CLAMP_TOL, 0)` are clamped to 0.
pub const MMD_CLAMP_TOL: f64 = 1e-12;

/// Neumaier compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Symmetrizes `m` in place: `m <- (m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k as f64 + 1.0);
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Numerically stable normalized exponential.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Orthonormal basis (as columns) of `{v in R^n : sum(v) = 0}`, built from
/// Helmert contrasts.
pub fn sum_zero_basis(n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            q[(i, k - 1)] = 1.0 / norm;
        }
        q[(k, k - 1)] = -(k as f64) / norm;
    }
    q
}

/// Two-sided 95% Wilson score interval for `failures` out of `trials`.
pub fn wilson_interval(failures: usize, trials: usize) -> (f64, f64) {
    const Z: f64 = 1.959_963_984_540_054;
    let n = trials as f64;
    let p = failures as f64 / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // the endpoints are exactly 0 and 1 at the extremes; avoid rounding residue
    let lo = if failures == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if failures == trials {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let values = [1.0, 1e-16, 1e-16, -1.0];
        assert_eq!(compensated_sum(values), 2e-16);
    }

    #[test]
    fn simplex_projection_is_identity_on_simplex() {
        let p = [0.2, 0.3, 0.5];
        let q = project_to_simplex(&p);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn simplex_projection_clips_negative_mass() {
        let q = project_to_simplex(&[1.2, -0.2]);
        assert_eq!(q, vec![1.0, 0.0]);
        let q = project_to_simplex(&[0.5, 0.5, 0.5]);
        for v in q {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn helmert_basis_is_orthonormal_and_sum_zero() {
        for n in 1..7 {
            let q = sum_zero_basis(n);
            let qtq = q.transpose() * &q;
            for i in 0..n - 1 {
                assert!(q.column(i).sum().abs() < 1e-14);
                for j in 0..n - 1 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq[(i, j)] - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn wilson_interval_brackets_rate() {
        let (lo, hi) = wilson_interval(0, 2000);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.002);
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo < 0.5 && hi > 0.5);
    }
}
