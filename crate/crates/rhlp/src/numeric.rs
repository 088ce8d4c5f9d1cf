//! Small numerical helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector};

/// `log(sum(exp(v)))` computed with a max shift.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of `N(mean, sigma2)` at `x`.
pub(crate) fn gaussian_logpdf(x: f64, mean: f64, sigma2: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + sigma2.ln()) - d * d / (2.0 * sigma2)
}

/// SplitMix64 finalizer; the standard 64-bit avalanche.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold one field into a derived seed. Stable across platforms and releases,
/// unlike `DefaultHasher`.
pub(crate) fn mix_seed(seed: u64, field: u64) -> u64 {
    splitmix64(seed ^ splitmix64(field))
}

/// Solve the symmetric positive-definite system `A x = b` by Cholesky,
/// falling back to a scaled ridge and finally to an SVD pseudo-inverse.
///
/// Monomial Gram matrices on wide time ranges get ill-conditioned; the ridge
/// is `1e-8 * trace(A) / dim` as a scale-free regularizer, and two rounds of
/// iterative refinement recover most of the accuracy the factorization
/// loses at high condition numbers.
pub(crate) fn solve_spd_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return refine(&chol, a, b);
    }
    let dim = a.nrows();
    let ridge = 1e-8 * a.trace() / dim as f64;
    let mut regularized = a.clone();
    for i in 0..dim {
        regularized[(i, i)] += ridge;
    }
    if let Some(chol) = Cholesky::new(regularized) {
        return refine(&chol, a, b);
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-12 * a.amax().max(1.0))
        .unwrap_or_else(|_| DVector::zeros(dim))
}

fn refine(chol: &Cholesky<f64, nalgebra::Dyn>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = chol.solve(b);
    for _ in 0..2 {
        let residual = b - a * &x;
        x += chol.solve(&residual);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_on_small_values() {
        let v: [f64; 3] = [0.3, -1.2, 2.5];
        let naive = (v.iter().map(|x: &f64| x.exp()).sum::<f64>()).ln();
        assert!((log_sum_exp(&v) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_huge_inputs() {
        let v = [1000.0, 998.0];
        let expected = 1000.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!((log_sum_exp(&v) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_of_all_neg_infinity_is_neg_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn mix_seed_is_order_sensitive() {
        assert_ne!(mix_seed(mix_seed(7, 1), 2), mix_seed(mix_seed(7, 2), 1));
        assert_eq!(mix_seed(7, 1), mix_seed(7, 1));
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = DVector::from_row_slice(&[1.5, -2.0]);
        let b = &a * &x;
        let solved = solve_spd_with_ridge(&a, &b);
        assert!((solved - x).amax() < 1e-12);
    }

    #[test]
    fn spd_solve_handles_singular_matrix() {
        // Rank-1 matrix; the ridge or pseudo-inverse path must not panic.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_row_slice(&[2.0, 2.0]);
        let solved = solve_spd_with_ridge(&a, &b);
        assert!(((&a * &solved) - &b).amax() < 1e-6);
    }
}
