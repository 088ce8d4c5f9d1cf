//! Model types and the pure functions of the gated polynomial mixture:
//! polynomial basis, logistic gating, component and mixture densities,
//! regression mean and log-likelihood.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::numeric::{gaussian_logpdf, log_sum_exp};

/// Paired observation sequence `(t_i, x_i)`, sorted by time on ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    t: Vec<f64>,
    x: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset, validating lengths and finiteness and sorting the
    /// pairs by time (the latent process assumes nondecreasing `t`).
    pub fn new(t: Vec<f64>, x: Vec<f64>) -> Result<Self, Error> {
        if t.len() != x.len() {
            return Err(Error::LengthMismatch {
                left: t.len(),
                right: x.len(),
            });
        }
        if t.is_empty() {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("t[{i}] is not finite")));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("x[{i}] is not finite")));
        }
        let sorted = t.windows(2).all(|w| w[0] <= w[1]);
        if sorted {
            return Ok(Self { t, x });
        }
        let mut pairs: Vec<(f64, f64)> = t.into_iter().zip(x).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (t, x) = pairs.into_iter().unzip();
        Ok(Self { t, x })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// `(min t, max t)`; well-defined because the sequence is sorted.
    pub fn time_range(&self) -> (f64, f64) {
        (self.t[0], self.t[self.t.len() - 1])
    }
}

/// Gate weight matrix `w` with one `(w_k0, w_k1)` row per component.
///
/// The last row is pinned to zero: the softmax in [`gate_proportions`] is
/// invariant under adding a common vector to every row, so the zero row
/// removes that indeterminacy.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    w: DMatrix<f64>,
}

impl GateWeights {
    /// Validates a `K x 2` matrix: finite entries, zero last row.
    pub fn new(w: DMatrix<f64>) -> Result<Self, Error> {
        if w.ncols() != 2 || w.nrows() == 0 {
            return Err(Error::InvalidData(format!(
                "gate weights must be K x 2, got {} x {}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("gate weights contain non-finite entries".into()));
        }
        let last = w.nrows() - 1;
        if w[(last, 0)] != 0.0 || w[(last, 1)] != 0.0 {
            return Err(Error::InvalidData("last gate row must be zero (gauge fixing)".into()));
        }
        Ok(Self { w })
    }

    /// All-zero gate for `k` components (uniform proportions at every `t`).
    pub fn zeros(k: usize) -> Self {
        Self {
            w: DMatrix::zeros(k, 2),
        }
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }
}

/// Full parameter state of the model: gate weights `w`, polynomial
/// coefficients `beta` (one row per component), and the shared variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RhlpParams {
    pub w: GateWeights,
    pub beta: DMatrix<f64>,
    pub sigma2: f64,
}

impl RhlpParams {
    pub fn new(w: GateWeights, beta: DMatrix<f64>, sigma2: f64) -> Result<Self, Error> {
        if beta.nrows() != w.k() {
            return Err(Error::InvalidData(format!(
                "beta has {} rows but gate has {} components",
                beta.nrows(),
                w.k()
            )));
        }
        if beta.ncols() == 0 || beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("beta must be K x (p+1) and finite".into()));
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidData(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self { w, beta, sigma2 })
    }

    /// Number of mixture components.
    pub fn k(&self) -> usize {
        self.beta.nrows()
    }

    /// Polynomial degree of the experts.
    pub fn degree(&self) -> usize {
        self.beta.ncols() - 1
    }

    /// Mean of component `k` (0-based) at time `t`.
    pub fn component_mean(&self, t: f64, k: usize) -> f64 {
        let basis = polynomial_basis(t, self.degree());
        self.beta.row(k).transpose().dot(&basis)
    }
}

/// Posterior component probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    tau: DMatrix<f64>,
}

impl Responsibilities {
    /// Validates entries in `[0, 1]` and row sums within `1e-12` of one.
    pub fn new(tau: DMatrix<f64>) -> Result<Self, Error> {
        if tau.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("responsibilities outside [0, 1]".into()));
        }
        for (i, row) in tau.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidData(format!(
                    "responsibility row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { tau })
    }

    pub fn n(&self) -> usize {
        self.tau.nrows()
    }

    pub fn k(&self) -> usize {
        self.tau.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.tau
    }

    /// Index of the most probable component per observation (lowest index
    /// wins ties, deterministically).
    pub fn map_labels(&self) -> Vec<usize> {
        self.tau
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Monomial vector `(1, t, t^2, ..., t^p)`.
pub fn polynomial_basis(t: f64, p: usize) -> DVector<f64> {
    let mut basis = DVector::zeros(p + 1);
    let mut power = 1.0;
    for j in 0..=p {
        basis[j] = power;
        power *= t;
    }
    basis
}

/// Design matrix with one monomial row per time point.
pub fn design_matrix(ts: &[f64], p: usize) -> DMatrix<f64> {
    let mut design = DMatrix::zeros(ts.len(), p + 1);
    for (i, &t) in ts.iter().enumerate() {
        let mut power = 1.0;
        for j in 0..=p {
            design[(i, j)] = power;
            power *= t;
        }
    }
    design
}

/// Softmax over gate logits `w_k0 + w_k1 * t` for an arbitrary `K x 2`
/// matrix, computed with a max shift so that huge logits do not overflow.
///
/// This is the raw kernel; it does not require the gauge-fixed last row and
/// is invariant under adding a common vector to every row.
pub fn softmax_gating(w: &DMatrix<f64>, t: f64) -> DVector<f64> {
    let logits: Vec<f64> = (0..w.nrows()).map(|k| w[(k, 0)] + w[(k, 1)] * t).collect();
    let lse = log_sum_exp(&logits);
    DVector::from_iterator(logits.len(), logits.iter().map(|l| (l - lse).exp()))
}

/// Fills `out` with log gate proportions; allocation-free for hot loops.
pub(crate) fn fill_log_softmax_gating(w: &DMatrix<f64>, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), w.nrows());
    let mut max = f64::NEG_INFINITY;
    for (k, slot) in out.iter_mut().enumerate() {
        let logit = w[(k, 0)] + w[(k, 1)] * t;
        *slot = logit;
        if logit > max {
            max = logit;
        }
    }
    let sum: f64 = out.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    for slot in out.iter_mut() {
        *slot -= lse;
    }
}

/// Fills `out` with gate proportions; allocation-free for hot loops.
pub(crate) fn fill_softmax_gating(w: &DMatrix<f64>, t: f64, out: &mut [f64]) {
    fill_log_softmax_gating(w, t, out);
    for slot in out.iter_mut() {
        *slot = slot.exp();
    }
}

/// Log of [`softmax_gating`], kept in log space for the E-step.
pub(crate) fn log_softmax_gating(w: &DMatrix<f64>, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; w.nrows()];
    fill_log_softmax_gating(w, t, &mut out);
    out
}

/// Gate proportions `pi_k(t; w)`; positive and summing to one.
pub fn gate_proportions(t: f64, w: &GateWeights) -> DVector<f64> {
    softmax_gating(w.matrix(), t)
}

/// Regression mean `f(t) = sum_k pi_k(t; w) * beta_k' basis(t)`.
///
/// Equals the conditional expectation of `x` under the mixture density, so
/// it can be checked against quadrature of `x * p(x | t)`.
pub fn regression_mean(t: f64, params: &RhlpParams) -> f64 {
    let pis = gate_proportions(t, &params.w);
    let basis = polynomial_basis(t, params.degree());
    (0..params.k())
        .map(|k| pis[k] * params.beta.row(k).transpose().dot(&basis))
        .sum()
}

/// Log-density of component `k` (0-based): `log N(x; beta_k' basis(t), sigma2)`.
pub fn component_logpdf(x: f64, t: f64, k: usize, params: &RhlpParams) -> f64 {
    gaussian_logpdf(x, params.component_mean(t, k), params.sigma2)
}

/// Log of the mixture density `sum_k pi_k(t) N(x; beta_k' basis(t), sigma2)`,
/// combined by log-sum-exp.
pub fn mixture_logpdf(x: f64, t: f64, params: &RhlpParams) -> f64 {
    let log_pis = log_softmax_gating(params.w.matrix(), t);
    let terms: Vec<f64> = (0..params.k())
        .map(|k| log_pis[k] + component_logpdf(x, t, k, params))
        .collect();
    log_sum_exp(&terms)
}

/// Observed-data log-likelihood: the sum of per-point mixture log-densities.
pub fn log_likelihood(data: &Dataset, params: &RhlpParams) -> f64 {
    data.t()
        .iter()
        .zip(data.x())
        .map(|(&t, &x)| mixture_logpdf(x, t, params))
        .sum()
}

/// Affine time rescaling `u = (t - offset) / scale`.
///
/// Fitting on `u` in `[0, 1]` keeps monomial Gram matrices well conditioned
/// when the raw time axis is wide; parameters can then be mapped back with
/// [`params_to_original_time`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScale {
    pub offset: f64,
    pub scale: f64,
}

impl TimeScale {
    /// Scale that maps the dataset's time range onto `[0, 1]`.
    pub fn unit_interval(data: &Dataset) -> Self {
        let (lo, hi) = data.time_range();
        let scale = if hi > lo { hi - lo } else { 1.0 };
        Self { offset: lo, scale }
    }

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.offset) / self.scale
    }
}

/// Rewrites coefficients of a polynomial in `u = (t - offset) / scale` as
/// coefficients in `t`, via binomial expansion.
pub fn poly_to_original_time(coeffs: &[f64], ts: &TimeScale) -> Vec<f64> {
    let p = coeffs.len() - 1;
    let mut out = vec![0.0; p + 1];
    // binom[j][m] built incrementally: C(j, m)
    let mut binom = vec![vec![0.0; p + 1]; p + 1];
    for (j, row) in binom.iter_mut().enumerate() {
        row[0] = 1.0;
        for m in 1..=j {
            row[m] = row[m - 1] * (j - m + 1) as f64 / m as f64;
        }
    }
    for (j, &b) in coeffs.iter().enumerate() {
        let scale_pow = ts.scale.powi(-(j as i32));
        for (m, out_m) in out.iter_mut().enumerate().take(j + 1) {
            *out_m += b * scale_pow * binom[j][m] * (-ts.offset).powi((j - m) as i32);
        }
    }
    out
}

/// Maps parameters fitted on normalized time back to the original scale.
/// Predictions are unchanged: `f(t; mapped) == f(u(t); fitted)`.
pub fn params_to_original_time(params: &RhlpParams, ts: &TimeScale) -> RhlpParams {
    let k = params.k();
    let p = params.degree();
    let mut beta = DMatrix::zeros(k, p + 1);
    for row in 0..k {
        let coeffs: Vec<f64> = params.beta.row(row).iter().cloned().collect();
        let mapped = poly_to_original_time(&coeffs, ts);
        for (j, v) in mapped.into_iter().enumerate() {
            beta[(row, j)] = v;
        }
    }
    // Gate logits are affine in t: w0 + w1 u = (w0 - w1 off/scale) + (w1/scale) t.
    let mut w = params.w.matrix().clone();
    for row in 0..k {
        let (w0, w1) = (w[(row, 0)], w[(row, 1)]);
        w[(row, 0)] = w0 - w1 * ts.offset / ts.scale;
        w[(row, 1)] = w1 / ts.scale;
    }
    RhlpParams {
        w: GateWeights::new(w).expect("gauge row stays zero under affine remap"),
        beta,
        sigma2: params.sigma2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params_for_test(k: usize, p: usize, seed: u64) -> RhlpParams {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut w = DMatrix::zeros(k, 2);
        for row in 0..k.saturating_sub(1) {
            w[(row, 0)] = rng.random_range(-2.0..2.0);
            w[(row, 1)] = rng.random_range(-2.0..2.0);
        }
        let beta = DMatrix::from_fn(k, p + 1, |_, _| rng.random_range(-3.0..3.0));
        RhlpParams::new(GateWeights::new(w).unwrap(), beta, rng.random_range(0.2..2.0)).unwrap()
    }

    #[test]
    fn basis_evaluates_monomials() {
        assert_eq!(polynomial_basis(2.0, 2).as_slice(), &[1.0, 2.0, 4.0]);
        assert_eq!(polynomial_basis(0.0, 3).as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(polynomial_basis(5.0, 1).as_slice(), &[1.0, 5.0]);
    }

    #[test]
    fn dataset_sorts_pairs_by_time() {
        let d = Dataset::new(vec![2.0, 1.0, 3.0], vec![20.0, 10.0, 30.0]).unwrap();
        assert_eq!(d.t(), &[1.0, 2.0, 3.0]);
        assert_eq!(d.x(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(matches!(
            Dataset::new(vec![1.0], vec![1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(Dataset::new(vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn single_component_gate_is_one() {
        let w = GateWeights::zeros(1);
        let pis = gate_proportions(3.7, &w);
        assert_eq!(pis.as_slice(), &[1.0]);
    }

    #[test]
    fn zero_weights_give_uniform_gate() {
        let pis = gate_proportions(-1.3, &GateWeights::zeros(3));
        for v in pis.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_component_gate_matches_scalar_sigmoid() {
        // logits (1, 0) at t = 0: (e/(1+e), 1/(1+e))
        let w = GateWeights::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let pis = gate_proportions(0.0, &w);
        assert!((pis[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((pis[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn gate_survives_huge_logits() {
        let w = GateWeights::new(DMatrix::from_row_slice(2, 2, &[547.0, -154.0, 0.0, 0.0])).unwrap();
        let pis = gate_proportions(0.0, &w);
        assert!((pis[0] - 1.0).abs() < 1e-12);
        assert!(pis.iter().all(|v| v.is_finite()));
        let pis = gate_proportions(5.0, &w);
        assert!((pis[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gauge_row_is_enforced() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]);
        assert!(GateWeights::new(w).is_err());
    }

    #[test]
    fn single_component_mean_is_the_polynomial() {
        let params = RhlpParams::new(
            GateWeights::zeros(1),
            DMatrix::from_row_slice(1, 2, &[2.0, 3.0]),
            1.0,
        )
        .unwrap();
        assert!((regression_mean(4.0, &params) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn hard_gate_reduces_mean_to_selected_component() {
        // Table-style two-quadratic setup with the gate saturated on
        // component 1 at t = 0.
        let w = GateWeights::new(DMatrix::from_row_slice(2, 2, &[50.0, -20.0, 0.0, 0.0])).unwrap();
        let beta = DMatrix::from_row_slice(2, 3, &[33.0, -20.0, 4.0, -78.0, 47.0, -5.0]);
        let params = RhlpParams::new(w, beta, 1.0).unwrap();
        assert!((regression_mean(0.0, &params) - 33.0).abs() < 1e-9);
    }

    #[test]
    fn regression_mean_matches_quadrature_of_mixture() {
        // Trapezoid quadrature of x * p(x | t) over a +-10 sigma window.
        for seed in 0..5u64 {
            let params = params_for_test(3, 2, seed);
            let t = 0.7 + seed as f64 * 0.6;
            let means: Vec<f64> = (0..3).map(|k| params.component_mean(t, k)).collect();
            let sigma = params.sigma2.sqrt();
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * sigma;
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * sigma;
            let m = 40_000;
            let h = (hi - lo) / m as f64;
            let integrand = |x: f64| x * mixture_logpdf(x, t, &params).exp();
            let mut integral = 0.5 * (integrand(lo) + integrand(hi));
            for i in 1..m {
                integral += integrand(lo + i as f64 * h);
            }
            integral *= h;
            assert!(
                (integral - regression_mean(t, &params)).abs() < 1e-6,
                "quadrature {integral} vs mean {}",
                regression_mean(t, &params)
            );
        }
    }

    #[test]
    fn component_logpdf_at_mode_and_one_sigma() {
        let params = params_for_test(2, 1, 3);
        let t = 1.3;
        let mean = params.component_mean(t, 0);
        let expected_mode = -0.5 * (2.0 * std::f64::consts::PI * params.sigma2).ln();
        assert!((component_logpdf(mean, t, 0, &params) - expected_mode).abs() < 1e-12);
        let one_sigma = component_logpdf(mean + params.sigma2.sqrt(), t, 0, &params);
        assert!((one_sigma - (expected_mode - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn component_logpdf_matches_direct_density_evaluation() {
        let params = params_for_test(3, 2, 11);
        let t = 2.9;
        for k in 0..3 {
            let mean = params.component_mean(t, k);
            let sigma = params.sigma2.sqrt();
            let x = mean + 1.3 * sigma;
            let direct = (1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                * (-0.5 * ((x - mean) / sigma).powi(2)).exp())
            .ln();
            assert!((component_logpdf(x, t, k, &params) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mixture_equals_component() {
        let params = params_for_test(1, 2, 5);
        assert!((mixture_logpdf(0.4, 1.1, &params) - component_logpdf(0.4, 1.1, 0, &params)).abs() < 1e-14);
    }

    #[test]
    fn identical_components_collapse_the_mixture() {
        let beta = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let w = GateWeights::new(DMatrix::from_row_slice(2, 2, &[0.8, -0.3, 0.0, 0.0])).unwrap();
        let params = RhlpParams::new(w, beta, 0.7).unwrap();
        let diff = mixture_logpdf(0.2, 1.9, &params) - component_logpdf(0.2, 1.9, 0, &params);
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn mixture_logpdf_matches_naive_sum() {
        let params = params_for_test(3, 2, 21);
        let (x, t) = (0.9, 1.4);
        let pis = gate_proportions(t, &params.w);
        let naive: f64 = (0..3)
            .map(|k| pis[k] * component_logpdf(x, t, k, &params).exp())
            .sum::<f64>()
            .ln();
        assert!((mixture_logpdf(x, t, &params) - naive).abs() < 1e-10);
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let params = params_for_test(3, 2, 8);
        let t = 2.2;
        let means: Vec<f64> = (0..3).map(|k| params.component_mean(t, k)).collect();
        let sigma = params.sigma2.sqrt();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * sigma;
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * sigma;
        let m = 20_000;
        let h = (hi - lo) / m as f64;
        let pdf = |x: f64| mixture_logpdf(x, t, &params).exp();
        let mut integral = 0.5 * (pdf(lo) + pdf(hi));
        for i in 1..m {
            integral += pdf(lo + i as f64 * h);
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 1e-4, "integral {integral}");
    }

    #[test]
    fn log_likelihood_is_additive() {
        let params = params_for_test(2, 1, 13);
        let single = Dataset::new(vec![1.0], vec![0.5]).unwrap();
        assert!(
            (log_likelihood(&single, &params) - mixture_logpdf(0.5, 1.0, &params)).abs() < 1e-14
        );

        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![0.3, -0.2, 0.9]).unwrap();
        let doubled = Dataset::new(
            vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0],
            vec![0.3, 0.3, -0.2, -0.2, 0.9, 0.9],
        )
        .unwrap();
        let l = log_likelihood(&data, &params);
        // additivity up to summation-order rounding
        assert!((log_likelihood(&doubled, &params) - 2.0 * l).abs() <= 8.0 * f64::EPSILON * l.abs());

        let pointwise: f64 = data
            .t()
            .iter()
            .zip(data.x())
            .map(|(&t, &x)| mixture_logpdf(x, t, &params))
            .sum();
        assert!((l - pointwise).abs() < 1e-10);
    }

    #[test]
    fn rescaled_params_predict_identically() {
        let params = params_for_test(3, 3, 17);
        let data = Dataset::new(
            (0..20).map(|i| i as f64 * 0.25).collect(),
            vec![0.0; 20],
        )
        .unwrap();
        let ts = TimeScale::unit_interval(&data);
        // Pretend `params` was fitted on normalized time; map it back.
        let original = params_to_original_time(&params, &ts);
        for &t in data.t() {
            let u = ts.normalize(t);
            let a = regression_mean(u, &params);
            let b = regression_mean(t, &original);
            assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn gate_sums_to_one_and_stays_open(
            // Bounded logits: saturated gates round to exactly 0 and 1 in
            // f64, which the huge-logit unit test covers separately.
            entries in proptest::collection::vec(-3.0f64..3.0, 2..=10),
            t in -4.0f64..4.0,
        ) {
            let k = entries.len() / 2;
            prop_assume!(k >= 1);
            let mut w = DMatrix::zeros(k, 2);
            for row in 0..k.saturating_sub(1) {
                w[(row, 0)] = entries[2 * row];
                w[(row, 1)] = entries[2 * row + 1];
            }
            let pis = gate_proportions(t, &GateWeights::new(w).unwrap());
            let sum: f64 = pis.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(pis.iter().all(|v| *v > 0.0 && *v < 1.0 || k == 1));
        }

        #[test]
        fn gate_is_gauge_invariant(
            entries in proptest::collection::vec(-20.0f64..20.0, 6),
            shift0 in -30.0f64..30.0,
            shift1 in -30.0f64..30.0,
            t in -5.0f64..5.0,
        ) {
            let w = DMatrix::from_row_slice(3, 2, &entries);
            let mut shifted = w.clone();
            for row in 0..3 {
                shifted[(row, 0)] += shift0;
                shifted[(row, 1)] += shift1;
            }
            let a = softmax_gating(&w, t);
            let b = softmax_gating(&shifted, t);
            let argmax = |v: &DVector<f64>| {
                (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap()
            };
            prop_assert_eq!(argmax(&a), argmax(&b));
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }
}
