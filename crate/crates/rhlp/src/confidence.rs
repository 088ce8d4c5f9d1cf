//! Asymptotic pointwise confidence bands for the fitted regression curve.
//!
//! The fitted value `f(t)` is asymptotically normal around the true curve
//! with variance `s^2(t) = D(t)' I^-1 D(t)`, where `D` is the gradient of
//! `f` in the parameters and `I` the total Fisher information, estimated
//! here by the outer product of per-observation scores (finite-difference
//! scores of the mixture log-density). The band is
//! `f(t) +- sqrt(chi2_quantile(dim(theta), 1 - alpha)) * s(t)`.

use nalgebra::{DMatrix, DVector};

use crate::model::{
    gate_proportions, mixture_logpdf, polynomial_basis, regression_mean, Dataset, GateWeights,
    RhlpParams,
};

/// Condition-number threshold beyond which the information matrix is
/// inverted by truncated pseudo-inverse (near-flat gauge directions).
const PINV_CONDITION: f64 = 1e12;

/// Dimension of the curve parameters `theta = (w_free, beta)`: excludes the
/// shared variance and the gauge-fixed gate row.
pub fn theta_dimension(k: usize, p: usize) -> usize {
    k * (p + 1) + 2 * (k - 1)
}

/// Dimension of the full parameter vector (adds the shared variance).
pub fn param_dimension(k: usize, p: usize) -> usize {
    theta_dimension(k, p) + 1
}

/// Flattens parameters in the fixed coordinate order: `beta` row-major,
/// free gate rows row-major, then the shared variance.
fn params_to_vec(params: &RhlpParams) -> DVector<f64> {
    let k = params.k();
    let p = params.degree();
    let mut phi = DVector::zeros(param_dimension(k, p));
    let mut at = 0;
    for c in 0..k {
        for j in 0..=p {
            phi[at] = params.beta[(c, j)];
            at += 1;
        }
    }
    for c in 0..k - 1 {
        phi[at] = params.w.matrix()[(c, 0)];
        phi[at + 1] = params.w.matrix()[(c, 1)];
        at += 2;
    }
    phi[at] = params.sigma2;
    phi
}

fn vec_to_params(phi: &DVector<f64>, k: usize, p: usize) -> RhlpParams {
    let mut beta = DMatrix::zeros(k, p + 1);
    let mut at = 0;
    for c in 0..k {
        for j in 0..=p {
            beta[(c, j)] = phi[at];
            at += 1;
        }
    }
    let mut w = DMatrix::zeros(k, 2);
    for c in 0..k - 1 {
        w[(c, 0)] = phi[at];
        w[(c, 1)] = phi[at + 1];
        at += 2;
    }
    RhlpParams {
        w: GateWeights::new(w).expect("gauge row zero by construction"),
        beta,
        sigma2: phi[at],
    }
}

/// Analytic gradient of the regression mean in the full parameter vector.
///
/// `df/dbeta_k = pi_k(t) basis(t)`; for a free gate row `k`,
/// `df/dw_kj = v_j pi_k (mu_k - f)` with `v = (1, t)`; `df/dsigma2 = 0`.
///
/// Coordinates are ordered `beta` row-major, then the free gate rows
/// row-major, then the shared variance — the same order used by
/// [`fisher_information`].
pub fn f_gradient(t: f64, params: &RhlpParams) -> DVector<f64> {
    let k = params.k();
    let p = params.degree();
    let pis = gate_proportions(t, &params.w);
    let basis = polynomial_basis(t, p);
    let means: Vec<f64> = (0..k).map(|c| params.beta.row(c).transpose().dot(&basis)).collect();
    let f: f64 = (0..k).map(|c| pis[c] * means[c]).sum();

    let mut grad = DVector::zeros(param_dimension(k, p));
    let mut at = 0;
    for c in 0..k {
        for j in 0..=p {
            grad[at] = pis[c] * basis[j];
            at += 1;
        }
    }
    for c in 0..k - 1 {
        let factor = pis[c] * (means[c] - f);
        grad[at] = factor;
        grad[at + 1] = factor * t;
        at += 2;
    }
    // df/dsigma2 = 0
    grad
}

/// Empirical total Fisher information: the symmetrized outer-product sum of
/// per-observation scores, the scores taken by central finite differences
/// of the mixture log-density with step `1e-5 (1 + |phi_j|)`.
pub fn fisher_information(data: &Dataset, params: &RhlpParams) -> DMatrix<f64> {
    let k = params.k();
    let p = params.degree();
    let phi = params_to_vec(params);
    let dim = phi.len();
    let sigma2_index = dim - 1;

    let mut steps = Vec::with_capacity(dim);
    let mut plus = Vec::with_capacity(dim);
    let mut minus = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut h = 1e-5 * (1.0 + phi[j].abs());
        if j == sigma2_index {
            // keep the downwind variance positive
            h = h.min(0.5 * phi[j]);
        }
        steps.push(h);
        let mut phi_plus = phi.clone();
        phi_plus[j] += h;
        plus.push(vec_to_params(&phi_plus, k, p));
        let mut phi_minus = phi.clone();
        phi_minus[j] -= h;
        minus.push(vec_to_params(&phi_minus, k, p));
    }

    let mut info = DMatrix::zeros(dim, dim);
    let mut score = DVector::zeros(dim);
    for (&t, &x) in data.t().iter().zip(data.x()) {
        for j in 0..dim {
            let lp = mixture_logpdf(x, t, &plus[j]);
            let lm = mixture_logpdf(x, t, &minus[j]);
            score[j] = (lp - lm) / (2.0 * steps[j]);
        }
        info.syger(1.0, &score, &score, 1.0);
    }
    // syger fills one triangle; mirror it
    for r in 0..dim {
        for s in 0..r {
            info[(s, r)] = info[(r, s)];
        }
    }
    (&info + info.transpose()) * 0.5
}

/// Cached information inverse for repeated band evaluations on one
/// `(data, params)` pair.
pub struct BandContext<'a> {
    params: &'a RhlpParams,
    information_inverse: DMatrix<f64>,
}

impl<'a> BandContext<'a> {
    pub fn new(data: &Dataset, params: &'a RhlpParams) -> Self {
        let info = fisher_information(data, params);
        let svd = info.svd(true, true);
        let max_singular = svd.singular_values.max();
        // one threshold serves both branches: an invertible, well-conditioned
        // matrix loses nothing, a near-singular one gets truncated
        let eps = max_singular.max(f64::MIN_POSITIVE) / PINV_CONDITION;
        let information_inverse = svd.pseudo_inverse(eps).expect("eps is positive");
        Self {
            params,
            information_inverse,
        }
    }

    /// Variance of the fitted curve at `t` (nonnegative quadratic form).
    pub fn variance_at(&self, t: f64) -> f64 {
        let grad = f_gradient(t, self.params);
        (&self.information_inverse * &grad).dot(&grad).max(0.0)
    }

    /// Pointwise band at level `1 - alpha` on the given grid.
    pub fn band(&self, grid: &[f64], alpha: f64) -> ConfidenceBand {
        assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0, 1)");
        let dof = theta_dimension(self.params.k(), self.params.degree());
        let scale = chi_square_quantile(dof, 1.0 - alpha).sqrt();
        let center: Vec<f64> = grid.iter().map(|&t| regression_mean(t, self.params)).collect();
        let half_width: Vec<f64> = grid
            .iter()
            .map(|&t| scale * self.variance_at(t).sqrt())
            .collect();
        ConfidenceBand {
            ts: grid.to_vec(),
            center,
            half_width,
            alpha,
        }
    }
}

/// Variance of the fitted curve at a single point. Builds the information
/// matrix on every call; use [`BandContext`] for grids.
pub fn pointwise_variance(t: f64, data: &Dataset, params: &RhlpParams) -> f64 {
    BandContext::new(data, params).variance_at(t)
}

/// Pointwise confidence band for the fitted curve on a grid.
pub fn confidence_band(
    grid: &[f64],
    data: &Dataset,
    params: &RhlpParams,
    alpha: f64,
) -> ConfidenceBand {
    BandContext::new(data, params).band(grid, alpha)
}

/// Symmetric pointwise band: `center +- half_width` per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBand {
    pub ts: Vec<f64>,
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
    pub alpha: f64,
}

impl ConfidenceBand {
    pub fn lower(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.half_width)
            .map(|(&c, &h)| c - h)
            .collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.half_width)
            .map(|(&c, &h)| c + h)
            .collect()
    }

    /// True when `value` lies inside the band at grid index `i`.
    pub fn covers(&self, i: usize, value: f64) -> bool {
        (value - self.center[i]).abs() <= self.half_width[i]
    }
}

// --- chi-square quantile via the regularized incomplete gamma function ---

/// Lanczos (g = 7) approximation of `ln Gamma(z)` for `z > 0`.
fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    debug_assert!(z > 0.0);
    if z < 0.5 {
        // reflection, only hit for dof = 0 which callers exclude
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut a = 0.99999999999980993;
    for (i, c) in COEFFS.iter().enumerate() {
        a += c / (z + (i + 1) as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`, by series for `x < a + 1`
/// and by continued fraction otherwise.
fn gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series expansion of P
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut denom = a;
        for _ in 0..500 {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (log_prefix.exp() * sum).min(1.0)
    } else {
        // Lentz continued fraction for Q
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - log_prefix.exp() * h).max(0.0)
    }
}

/// CDF of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Inverse CDF of the chi-square distribution, by bisection on the
/// regularized lower incomplete gamma function to absolute tolerance 1e-10.
pub fn chi_square_quantile(dof: usize, prob: f64) -> f64 {
    assert!(dof >= 1, "dof must be at least 1");
    assert!(prob > 0.0 && prob < 1.0, "prob must be in (0, 1)");
    let mut hi = dof as f64 + 10.0;
    while chi_square_cdf(dof, hi) < prob {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if chi_square_cdf(dof, mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{fit, FitConfig};
    use crate::model::design_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn random_params(k: usize, p: usize, seed: u64) -> RhlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = DMatrix::zeros(k, 2);
        for c in 0..k - 1 {
            w[(c, 0)] = rng.random_range(-1.5..1.5);
            w[(c, 1)] = rng.random_range(-1.5..1.5);
        }
        let beta = DMatrix::from_fn(k, p + 1, |_, _| rng.random_range(-2.0..2.0));
        RhlpParams::new(GateWeights::new(w).unwrap(), beta, rng.random_range(0.4..1.6)).unwrap()
    }

    fn linear_dataset(n: usize, sigma: f64, seed: u64) -> Dataset {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts: Vec<f64> = (0..n).map(|i| 5.0 * i as f64 / (n - 1) as f64).collect();
        let xs: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.0 + 2.0 * t + sigma * z
            })
            .collect();
        Dataset::new(ts, xs).unwrap()
    }

    #[test]
    fn theta_dimension_examples() {
        assert_eq!(theta_dimension(4, 2), 18);
        assert_eq!(theta_dimension(2, 2), 8);
        // relation to the free-parameter count: theta excludes sigma2
        for k in 1..6 {
            for p in 0..4 {
                assert_eq!(
                    theta_dimension(k, p) + 1,
                    crate::selection::free_param_count(k, p)
                );
            }
        }
    }

    #[test]
    fn param_vector_round_trips() {
        let params = random_params(3, 2, 5);
        let phi = params_to_vec(&params);
        let back = vec_to_params(&phi, 3, 2);
        assert_eq!(params, back);
    }

    #[test]
    fn gradient_of_single_component_is_the_basis() {
        let params = RhlpParams::new(
            GateWeights::zeros(1),
            DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]),
            0.9,
        )
        .unwrap();
        let grad = f_gradient(2.0, &params);
        assert_eq!(grad.len(), 4);
        assert_eq!(grad.as_slice()[..3], [1.0, 2.0, 4.0]);
        assert_eq!(grad[3], 0.0);
    }

    #[test]
    fn gate_partials_vanish_when_experts_agree() {
        let beta = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let w = GateWeights::new(DMatrix::from_row_slice(2, 2, &[0.7, -0.4, 0.0, 0.0])).unwrap();
        let params = RhlpParams::new(w, beta, 1.0).unwrap();
        let grad = f_gradient(1.7, &params);
        // coordinates 4, 5 are the free gate row
        assert!(grad[4].abs() < 1e-14);
        assert!(grad[5].abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..100 {
            let k = rng.random_range(1..=4);
            let p = rng.random_range(0..=3);
            let params = random_params(k, p, trial);
            let t = rng.random_range(0.0..5.0);
            let grad = f_gradient(t, &params);
            let phi = params_to_vec(&params);
            let scale = grad.amax().max(1.0);
            for j in 0..phi.len() {
                let h = 1e-6 * (1.0 + phi[j].abs());
                let mut plus = phi.clone();
                plus[j] += h;
                let mut minus = phi.clone();
                minus[j] -= h;
                let fd = (regression_mean(t, &vec_to_params(&plus, k, p))
                    - regression_mean(t, &vec_to_params(&minus, k, p)))
                    / (2.0 * h);
                assert!(
                    (grad[j] - fd).abs() / scale < 1e-6,
                    "trial {trial} coord {j}: {} vs {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn fd_scores_match_analytic_scores_for_gaussian_regression() {
        // K = 1: the score has a closed form; the FD machinery must agree.
        let n = 40;
        let data = linear_dataset(n, 0.8, 3);
        let config = FitConfig::with_seed(1);
        let result = fit(&data, 1, 1, &config).unwrap();
        let params = &result.params;
        let info = fisher_information(&data, params);

        let design = design_matrix(data.t(), 1);
        let dim = 3; // two coefficients + variance
        let mut oracle = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let mean = params.beta[(0, 0)] + params.beta[(0, 1)] * data.t()[i];
            let e = data.x()[i] - mean;
            let s = DVector::from_column_slice(&[
                e * design[(i, 0)] / params.sigma2,
                e * design[(i, 1)] / params.sigma2,
                -0.5 / params.sigma2 + e * e / (2.0 * params.sigma2 * params.sigma2),
            ]);
            oracle += &s * s.transpose();
        }
        let scale = oracle.amax();
        for r in 0..dim {
            for c in 0..dim {
                assert!(
                    (info[(r, c)] - oracle[(r, c)]).abs() / scale < 1e-3,
                    "[{r},{c}]: {} vs {}",
                    info[(r, c)],
                    oracle[(r, c)]
                );
            }
        }
    }

    #[test]
    fn information_concentrates_to_the_classical_blocks() {
        // Large-sample check against the expected information of Gaussian
        // linear regression: T'T / sigma2 and n / (2 sigma2^2).
        let n = 4000;
        let data = linear_dataset(n, 1.0, 9);
        let result = fit(&data, 1, 1, &FitConfig::with_seed(2)).unwrap();
        let params = &result.params;
        let info = fisher_information(&data, params);
        let design = design_matrix(data.t(), 1);
        let expected_beta = design.transpose() * &design / params.sigma2;
        for r in 0..2 {
            for c in 0..2 {
                let rel = (info[(r, c)] - expected_beta[(r, c)]).abs() / expected_beta.amax();
                assert!(rel < 0.1, "beta block [{r},{c}] off by {rel}");
            }
        }
        let expected_var = n as f64 / (2.0 * params.sigma2 * params.sigma2);
        let rel = (info[(2, 2)] - expected_var).abs() / expected_var;
        assert!(rel < 0.1, "variance block off by {rel}");
    }

    #[test]
    fn information_is_additive_and_symmetric() {
        let data = linear_dataset(25, 0.7, 13);
        let params = random_params(2, 1, 8);
        let info = fisher_information(&data, &params);
        assert_eq!(info, info.transpose());

        let doubled = Dataset::new(
            data.t().iter().flat_map(|&t| [t, t]).collect(),
            data.x().iter().flat_map(|&x| [x, x]).collect(),
        )
        .unwrap();
        let info2 = fisher_information(&doubled, &params);
        let scale = info.amax();
        for r in 0..info.nrows() {
            for c in 0..info.ncols() {
                assert!(
                    (info2[(r, c)] - 2.0 * info[(r, c)]).abs() <= 1e-8 * scale.max(1.0),
                    "[{r},{c}]"
                );
            }
        }
    }

    #[test]
    fn variance_matches_ols_prediction_variance() {
        let n = 800;
        let data = linear_dataset(n, 1.2, 21);
        let result = fit(&data, 1, 1, &FitConfig::with_seed(3)).unwrap();
        let params = &result.params;
        let context = BandContext::new(&data, params);
        let design = design_matrix(data.t(), 1);
        let gram_inv = (design.transpose() * &design).try_inverse().unwrap();
        for &t in &[1.0, 2.5, 4.0] {
            let basis = polynomial_basis(t, 1);
            let ols = params.sigma2 * (gram_inv.clone() * &basis).dot(&basis);
            let ours = context.variance_at(t);
            let rel = (ours - ols).abs() / ols;
            assert!(rel < 0.10, "t={t}: {ours} vs OLS {ols} (rel {rel})");
        }
    }

    #[test]
    fn variance_is_nonnegative_and_grows_with_noise() {
        let data = linear_dataset(200, 1.0, 33);
        let result = fit(&data, 1, 1, &FitConfig::with_seed(5)).unwrap();
        let base = result.params.clone();
        let noisier = RhlpParams {
            sigma2: base.sigma2 * 4.0,
            ..base.clone()
        };
        for &t in &[0.5, 2.5, 4.5] {
            let a = pointwise_variance(t, &data, &base);
            let b = pointwise_variance(t, &data, &noisier);
            assert!(a >= 0.0);
            assert!(b > a, "t={t}: {b} vs {a}");
        }
    }

    #[test]
    fn duplicating_the_sample_shrinks_the_band() {
        let data = linear_dataset(150, 1.0, 44);
        let result = fit(&data, 1, 1, &FitConfig::with_seed(6)).unwrap();
        let params = &result.params;
        let doubled = Dataset::new(
            data.t().iter().flat_map(|&t| [t, t]).collect(),
            data.x().iter().flat_map(|&x| [x, x]).collect(),
        )
        .unwrap();
        let small = BandContext::new(&data, params);
        let large = BandContext::new(&doubled, params);
        for &t in &[1.0, 2.5, 4.0] {
            let a = small.variance_at(t).sqrt();
            let b = large.variance_at(t).sqrt();
            // doubling the information should shrink s by sqrt(2)
            assert!(b < a * (1.0 / 2.0f64.sqrt() + 0.05), "t={t}: {b} vs {a}");
        }
    }

    #[test]
    fn chi_square_quantile_reference_values() {
        assert!((chi_square_quantile(1, 0.95) - 3.841458820694124).abs() < 1e-4);
        // closed form: CDF of chi2(2) is 1 - exp(-x/2)
        assert!((chi_square_quantile(2, 1.0 - (-1.0f64).exp()) - 2.0).abs() < 1e-9);
        assert!((chi_square_quantile(19, 0.95) - 30.14352720564616).abs() < 1e-3);
    }

    #[test]
    fn chi_square_quantile_matches_statrs() {
        for dof in [1usize, 2, 5, 8, 18, 19, 30] {
            for prob in [0.05, 0.5, 0.9, 0.95, 0.99] {
                let ours = chi_square_quantile(dof, prob);
                let oracle = ChiSquared::new(dof as f64).unwrap().inverse_cdf(prob);
                assert!(
                    (ours - oracle).abs() < 1e-6 * (1.0 + oracle),
                    "dof={dof} prob={prob}: {ours} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn chi_square_quantile_is_monotone() {
        let mut last = 0.0;
        for prob in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let q = chi_square_quantile(5, prob);
            assert!(q > last);
            last = q;
        }
        let mut last = 0.0;
        for dof in 1..12 {
            let q = chi_square_quantile(dof, 0.9);
            assert!(q > last);
            last = q;
        }
    }

    #[test]
    fn band_is_symmetric_and_shrinks_as_alpha_grows() {
        let data = linear_dataset(120, 1.0, 55);
        let result = fit(&data, 2, 1, &FitConfig { n_starts: 3, ..FitConfig::with_seed(7) }).unwrap();
        let grid: Vec<f64> = (0..21).map(|i| 0.25 * i as f64).collect();
        let context = BandContext::new(&data, &result.params);
        let wide = context.band(&grid, 0.05);
        let narrow = context.band(&grid, 0.9);
        let tiny = context.band(&grid, 0.999999);
        for i in 0..grid.len() {
            // symmetry holds by representation: one half-width on each side
            assert_eq!(wide.upper()[i], wide.center[i] + wide.half_width[i]);
            assert_eq!(wide.lower()[i], wide.center[i] - wide.half_width[i]);
            assert!(wide.half_width[i] >= 0.0);
            assert!(narrow.half_width[i] < wide.half_width[i]);
            assert!(tiny.half_width[i] < 0.15 * wide.half_width[i] + 1e-12);
        }
        assert_eq!(wide.center, narrow.center);
    }
}
