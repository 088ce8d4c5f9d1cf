//! Maximum-likelihood estimation by EM with an inner IRLS solver for the
//! gate weights, multi-start initialization and convergence bookkeeping.
//!
//! Each EM iteration alternates:
//! - E-step: posterior component probabilities and the current log-likelihood
//! - M-step: closed-form weighted least squares for each `beta_k`, pooled
//!   variance update, and Newton-Raphson (IRLS) maximization of the gate
//!   objective `Q1(w) = sum_ik tau_ik log pi_k(t_i; w)`
//!
//! `Q1` is concave, so IRLS with step-halving converges to its maximizer and
//! the observed log-likelihood never decreases across EM iterations.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Error;
use crate::model::{
    fill_log_softmax_gating, fill_softmax_gating, regression_mean, Dataset, GateWeights,
    Responsibilities, RhlpParams,
};
use crate::numeric::{gaussian_logpdf, log_sum_exp, solve_spd_with_ridge};

/// Responsibility mass below which a component counts as starved.
const DEGENERATE_MASS: f64 = 1e-8;
/// Variance floor; keeps densities finite on degenerate perfect fits.
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// Restarts allowed per start before it is declared failed.
const MAX_RESTARTS: usize = 3;

/// Stopping rules and start count for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Independent random starts; the best final log-likelihood wins.
    pub n_starts: usize,
    /// Relative log-likelihood change below which EM stops.
    pub em_tol: f64,
    pub em_max_iter: usize,
    /// Relative `Q1` change below which the inner IRLS stops.
    pub irls_tol: f64,
    pub irls_max_iter: usize,
    /// Base seed; start `s` uses stream `s` of the generator.
    pub seed: u64,
    /// Caps IRLS iterations per M-step (generalized EM). With a cap the
    /// first EM iteration may not reach the `Q1` maximizer, so the ascent
    /// guarantee holds only from the second iteration on.
    pub gem_irls_cap: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_starts: 10,
            em_tol: 1e-6,
            em_max_iter: 1000,
            irls_tol: 1e-6,
            irls_max_iter: 50,
            seed: 0,
            gem_irls_cap: None,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Converged parameters plus the diagnostics of the winning EM run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: RhlpParams,
    /// One log-likelihood value per EM iteration, starting at the initial
    /// parameters; nondecreasing up to floating-point slack.
    pub loglik_trace: Vec<f64>,
    pub responsibilities: Responsibilities,
    /// Fitted regression curve at the sample times.
    pub fitted: Vec<f64>,
    /// Most probable component per observation (0-based).
    pub map_labels: Vec<usize>,
    pub n_iter: usize,
    pub converged: bool,
    pub best_start_index: usize,
}

impl FitResult {
    /// Final log-likelihood.
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// E-step: responsibilities and the observed log-likelihood, computed
/// jointly in log space (they share the same per-point normalizer).
pub fn e_step(data: &Dataset, params: &RhlpParams) -> (Responsibilities, f64) {
    let n = data.len();
    let k = params.k();
    let p = params.degree();
    let mut tau = DMatrix::zeros(n, k);
    let mut loglik = 0.0;
    let mut terms = vec![0.0; k];
    let mut log_pis = vec![0.0; k];
    let mut basis = vec![0.0; p + 1];
    for i in 0..n {
        let t = data.t()[i];
        let x = data.x()[i];
        fill_log_softmax_gating(params.w.matrix(), t, &mut log_pis);
        let mut power = 1.0;
        for b in basis.iter_mut() {
            *b = power;
            power *= t;
        }
        for (c, term) in terms.iter_mut().enumerate() {
            let mut mean = 0.0;
            for (j, b) in basis.iter().enumerate() {
                mean += params.beta[(c, j)] * b;
            }
            *term = log_pis[c] + gaussian_logpdf(x, mean, params.sigma2);
        }
        let lse = log_sum_exp(&terms);
        loglik += lse;
        for (c, term) in terms.iter().enumerate() {
            tau[(i, c)] = (term - lse).exp();
        }
    }
    let tau = Responsibilities::new(tau).expect("log-space normalization yields a valid posterior");
    (tau, loglik)
}

/// M-step for the polynomial coefficients: one weighted least-squares
/// problem per component, `beta_k = (T' W_k T)^-1 T' W_k x`.
///
/// Fails with [`Error::DegenerateComponent`] when a component's
/// responsibility mass is below `1e-8`; callers restart from a fresh
/// initialization.
pub fn m_step_beta(data: &Dataset, tau: &Responsibilities, p: usize) -> Result<DMatrix<f64>, Error> {
    let n = data.len();
    let k = tau.k();
    let tau = tau.matrix();
    let mut beta = DMatrix::zeros(k, p + 1);
    let mut weights = vec![0.0; n];
    for c in 0..k {
        let mut mass = 0.0;
        for (i, weight) in weights.iter_mut().enumerate() {
            *weight = tau[(i, c)];
            mass += *weight;
        }
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateComponent { component: c });
        }
        let solution = wls_polyfit(data.t(), data.x(), &weights, p);
        for j in 0..=p {
            beta[(c, j)] = solution[j];
        }
    }
    Ok(beta)
}

/// M-step for the shared variance: responsibility-weighted mean squared
/// residual over all components, floored at `1e-12`.
pub fn m_step_sigma(data: &Dataset, tau: &Responsibilities, beta: &DMatrix<f64>) -> f64 {
    let n = data.len();
    let k = tau.k();
    let p = beta.ncols() - 1;
    let tau = tau.matrix();
    let mut total = 0.0;
    let mut basis = vec![0.0; p + 1];
    for i in 0..n {
        let mut power = 1.0;
        for b in basis.iter_mut() {
            *b = power;
            power *= data.t()[i];
        }
        for c in 0..k {
            let mut mean = 0.0;
            for (j, b) in basis.iter().enumerate() {
                mean += beta[(c, j)] * b;
            }
            let r = data.x()[i] - mean;
            total += tau[(i, c)] * r * r;
        }
    }
    (total / n as f64).max(SIGMA2_FLOOR)
}

/// Gate objective `Q1(w) = sum_ik tau_ik log pi_k(t_i; w)`.
pub fn q1_value(ts: &[f64], tau: &DMatrix<f64>, w: &GateWeights) -> f64 {
    let mut q1 = 0.0;
    let mut log_pis = vec![0.0; w.k()];
    for (i, &t) in ts.iter().enumerate() {
        fill_log_softmax_gating(w.matrix(), t, &mut log_pis);
        for (c, lp) in log_pis.iter().enumerate() {
            let weight = tau[(i, c)];
            if weight > 0.0 {
                q1 += weight * lp;
            }
        }
    }
    q1
}

/// Gradient of `Q1` over the free gate rows (row-major), i.e. block `k` is
/// `sum_i (tau_ik - pi_k(t_i)) * (1, t_i)` for `k < K-1`.
pub fn q1_gradient(ts: &[f64], tau: &DMatrix<f64>, w: &GateWeights) -> DVector<f64> {
    let k = w.k();
    let free = k.saturating_sub(1);
    let mut grad = DVector::zeros(2 * free);
    let mut pis = vec![0.0; k];
    for (i, &t) in ts.iter().enumerate() {
        fill_softmax_gating(w.matrix(), t, &mut pis);
        for c in 0..free {
            let d = tau[(i, c)] - pis[c];
            grad[2 * c] += d;
            grad[2 * c + 1] += d * t;
        }
    }
    grad
}

/// Hessian of `Q1` over the free gate rows: 2x2 blocks
/// `H_kl = -sum_i pi_k (delta_kl - pi_l) v_i v_i'` with `v_i = (1, t_i)`.
pub fn q1_hessian(ts: &[f64], w: &GateWeights) -> DMatrix<f64> {
    let k = w.k();
    let free = k.saturating_sub(1);
    let mut hess = DMatrix::zeros(2 * free, 2 * free);
    let mut pis = vec![0.0; k];
    for &t in ts {
        fill_softmax_gating(w.matrix(), t, &mut pis);
        for a in 0..free {
            for b in 0..free {
                let delta = if a == b { 1.0 } else { 0.0 };
                let coeff = -pis[a] * (delta - pis[b]);
                hess[(2 * a, 2 * b)] += coeff;
                hess[(2 * a, 2 * b + 1)] += coeff * t;
                hess[(2 * a + 1, 2 * b)] += coeff * t;
                hess[(2 * a + 1, 2 * b + 1)] += coeff * t * t;
            }
        }
    }
    hess
}

/// Result of one IRLS solve.
#[derive(Debug, Clone)]
pub struct IrlsOutcome {
    pub weights: GateWeights,
    /// `Q1` at the returned weights.
    pub q1: f64,
    pub n_iter: usize,
    /// Set when the damped Hessian stayed singular up to `lambda = 1e-2`
    /// and the current iterate was returned as-is.
    pub singular: bool,
}

fn apply_free_step(w: &GateWeights, direction: &DVector<f64>, step: f64) -> GateWeights {
    let mut mat = w.matrix().clone();
    let free = w.k() - 1;
    for c in 0..free {
        mat[(c, 0)] += step * direction[2 * c];
        mat[(c, 1)] += step * direction[2 * c + 1];
    }
    GateWeights::new(mat).expect("free-row update keeps the gauge row zero")
}

/// Maximizes `Q1` over the free gate rows by Newton-Raphson with
/// step-halving, keeping the last row pinned at zero.
///
/// Step-halving makes `Q1` nondecreasing across iterations; a singular
/// Hessian is Levenberg-damped before giving up.
pub fn irls_fit_gates(
    data: &Dataset,
    tau: &Responsibilities,
    w_init: &GateWeights,
    tol: f64,
    max_iter: usize,
) -> IrlsOutcome {
    let k = w_init.k();
    let ts = data.t();
    let tau = tau.matrix();
    if k == 1 {
        return IrlsOutcome {
            weights: w_init.clone(),
            q1: 0.0,
            n_iter: 0,
            singular: false,
        };
    }
    let mut w = w_init.clone();
    let mut q1 = q1_value(ts, tau, &w);
    let mut singular = false;
    let mut n_iter = 0;
    for _ in 0..max_iter {
        let grad = q1_gradient(ts, tau, &w);
        let neg_hess = -q1_hessian(ts, &w);
        let direction = match newton_direction(&neg_hess, &grad) {
            Some(d) => d,
            None => {
                singular = true;
                break;
            }
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let candidate = apply_free_step(&w, &direction, step);
            let q1_candidate = q1_value(ts, tau, &candidate);
            if q1_candidate >= q1 {
                accepted = Some((candidate, q1_candidate));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, q1_new)) = accepted else {
            break; // no ascent step left; numerically at the optimum
        };
        n_iter += 1;
        let rel = (q1_new - q1).abs() / q1.abs().max(1e-300);
        w = candidate;
        q1 = q1_new;
        if rel < tol {
            break;
        }
    }
    IrlsOutcome {
        weights: w,
        q1,
        n_iter,
        singular,
    }
}

/// Solves `M d = g` for the ascent direction, escalating Levenberg damping
/// from `1e-8` to `1e-2` when the factorization fails.
fn newton_direction(m: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Some(chol.solve(g));
    }
    let mut lambda = 1e-8;
    while lambda <= 1e-2 {
        let mut damped = m.clone();
        for i in 0..m.nrows() {
            damped[(i, i)] += lambda;
        }
        if let Some(chol) = Cholesky::new(damped) {
            return Some(chol.solve(g));
        }
        lambda *= 10.0;
    }
    None
}

/// Random small gate used to seed the IRLS at the first EM iteration.
fn random_small_gate(k: usize, rng: &mut ChaCha8Rng) -> GateWeights {
    let normal = Normal::new(0.0, 0.5).expect("valid std dev");
    let mut mat = DMatrix::zeros(k, 2);
    for c in 0..k.saturating_sub(1) {
        mat[(c, 0)] = normal.sample(rng);
        mat[(c, 1)] = normal.sample(rng);
    }
    GateWeights::new(mat).expect("finite draws with zero gauge row")
}

/// Per-component weighted least-squares polynomial fit used by the M-steps.
pub(crate) fn wls_polyfit(ts: &[f64], xs: &[f64], weights: &[f64], p: usize) -> DVector<f64> {
    let mut gram = DMatrix::zeros(p + 1, p + 1);
    let mut moment = DVector::zeros(p + 1);
    let mut basis = vec![0.0; p + 1];
    for ((&t, &x), &weight) in ts.iter().zip(xs).zip(weights) {
        if weight == 0.0 {
            continue;
        }
        let mut power = 1.0;
        for b in basis.iter_mut() {
            *b = power;
            power *= t;
        }
        for (r, br) in basis.iter().enumerate() {
            moment[r] += weight * br * x;
            for (s, bs) in basis.iter().enumerate().skip(r) {
                gram[(r, s)] += weight * br * bs;
            }
        }
    }
    for r in 0..=p {
        for s in 0..r {
            gram[(r, s)] = gram[(s, r)];
        }
    }
    solve_spd_with_ridge(&gram, &moment)
}

/// Random contiguous time partition with per-block OLS: returns the block
/// coefficient matrix, the pooled residual variance and each block's time
/// midpoint. Shared by the gated model and the HMM baseline initializers.
pub(crate) fn random_block_ols(
    data: &Dataset,
    k: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, f64, Vec<f64>), Error> {
    let n = data.len();
    let min_block = p + 2;
    let needed = k * min_block;
    if n < needed {
        return Err(Error::TooFewPoints { needed, got: n });
    }

    // Block sizes: minimum size plus a random composition of the surplus.
    let surplus = n - needed;
    let mut cuts: Vec<usize> = (0..k.saturating_sub(1))
        .map(|_| rng.random_range(0..=surplus))
        .collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(k);
    let mut prev = 0;
    for &c in &cuts {
        sizes.push(min_block + (c - prev));
        prev = c;
    }
    sizes.push(min_block + (surplus - prev));

    let mut beta = DMatrix::zeros(k, p + 1);
    let mut sse = 0.0;
    let mut start = 0;
    let mut midpoints = Vec::with_capacity(k);
    for (block, &size) in sizes.iter().enumerate() {
        let end = start + size;
        let ts = &data.t()[start..end];
        let xs = &data.x()[start..end];
        let ones = vec![1.0; ts.len()];
        let coeffs = wls_polyfit(ts, xs, &ones, p);
        for j in 0..=p {
            beta[(block, j)] = coeffs[j];
        }
        for (&t, &x) in ts.iter().zip(xs) {
            let mut fitted = 0.0;
            let mut power = 1.0;
            for c in coeffs.iter() {
                fitted += c * power;
                power *= t;
            }
            sse += (x - fitted) * (x - fitted);
        }
        midpoints.push(0.5 * (ts[0] + ts[ts.len() - 1]));
        start = end;
    }
    let sigma2 = (sse / n as f64).max(SIGMA2_FLOOR);
    Ok((beta, sigma2, midpoints))
}

/// Random-partition initialization: splits the time axis into `k`
/// contiguous blocks (each at least `p + 2` points), fits ordinary least
/// squares per block, pools the residual variance and shapes the gate so
/// that its proportions approximate the block indicators.
pub fn initialize(
    data: &Dataset,
    k: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RhlpParams, Error> {
    let (beta, sigma2, midpoints) = random_block_ols(data, k, p, rng)?;
    let w = indicator_gate(&midpoints, data.time_range());
    RhlpParams::new(w, beta, sigma2)
}

/// Gate whose logits approximate contiguous block indicators: slopes rise
/// to zero in steps of `10 / range(t)` and intercepts place each crossing
/// midway between adjacent block midpoints.
fn indicator_gate(midpoints: &[f64], (t_min, t_max): (f64, f64)) -> GateWeights {
    let k = midpoints.len();
    let mut mat = DMatrix::zeros(k, 2);
    if k == 1 {
        return GateWeights::new(mat).expect("zero gate is valid");
    }
    let range = t_max - t_min;
    let lambda = if range > 0.0 { 10.0 / range } else { 0.0 };
    for c in 0..k {
        mat[(c, 1)] = -lambda * (k - 1 - c) as f64;
    }
    for c in (0..k - 1).rev() {
        let crossing = 0.5 * (midpoints[c] + midpoints[c + 1]);
        mat[(c, 0)] = mat[(c + 1, 0)] + lambda * crossing;
    }
    GateWeights::new(mat).expect("finite indicator gate with zero gauge row")
}

struct StartOutcome {
    params: RhlpParams,
    trace: Vec<f64>,
    tau: Responsibilities,
    converged: bool,
}

/// Responsibility-weighted squared error of one coefficient row.
fn weighted_row_sse(data: &Dataset, tau: &DMatrix<f64>, component: usize, row: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, (&t, &x)) in data.t().iter().zip(data.x()).enumerate() {
        let mut mean = 0.0;
        let mut power = 1.0;
        for &coeff in row {
            mean += coeff * power;
            power *= t;
        }
        total += tau[(i, component)] * (x - mean) * (x - mean);
    }
    total
}

/// Keeps each previous coefficient row when the fresh solve did not reach a
/// lower weighted squared error. Near convergence on ill-conditioned
/// monomial Grams the factorization noise can exceed the true improvement;
/// this keeps the complete-data objective (and hence the log-likelihood)
/// nondecreasing.
fn guard_beta_ascent(
    data: &Dataset,
    tau: &Responsibilities,
    previous: &DMatrix<f64>,
    fresh: &mut DMatrix<f64>,
) {
    let p = fresh.ncols() - 1;
    for c in 0..fresh.nrows() {
        let old_row: Vec<f64> = previous.row(c).iter().cloned().collect();
        let new_row: Vec<f64> = fresh.row(c).iter().cloned().collect();
        let old_sse = weighted_row_sse(data, tau.matrix(), c, &old_row);
        let new_sse = weighted_row_sse(data, tau.matrix(), c, &new_row);
        if old_sse < new_sse {
            for j in 0..=p {
                fresh[(c, j)] = previous[(c, j)];
            }
        }
    }
}

fn em_run(
    data: &Dataset,
    initial: RhlpParams,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StartOutcome, Error> {
    let k = initial.k();
    let p = initial.degree();
    let irls_cap = config.gem_irls_cap.unwrap_or(config.irls_max_iter);
    let (mut tau, mut loglik) = e_step(data, &initial);
    let mut trace = vec![loglik];
    let mut w_prev = initial.w.clone();
    let mut params = initial;
    let mut converged = false;
    for q in 1..=config.em_max_iter {
        let mut beta = m_step_beta(data, &tau, p)?;
        guard_beta_ascent(data, &tau, &params.beta, &mut beta);
        let sigma2 = m_step_sigma(data, &tau, &beta);
        let w_start = if q == 1 {
            random_small_gate(k, rng)
        } else {
            w_prev
        };
        let irls = irls_fit_gates(data, &tau, &w_start, config.irls_tol, irls_cap);
        params = RhlpParams {
            w: irls.weights,
            beta,
            sigma2,
        };
        let (tau_new, loglik_new) = e_step(data, &params);
        tau = tau_new;
        trace.push(loglik_new);
        let rel = (loglik_new - loglik).abs() / loglik.abs().max(1e-300);
        loglik = loglik_new;
        w_prev = params.w.clone();
        if rel < config.em_tol {
            converged = true;
            break;
        }
    }
    Ok(StartOutcome {
        params,
        trace,
        tau,
        converged,
    })
}

fn run_start(data: &Dataset, k: usize, p: usize, config: &FitConfig, start: usize) -> Option<StartOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(start as u64);
    for _attempt in 0..=MAX_RESTARTS {
        let initial = initialize(data, k, p, &mut rng).ok()?;
        match em_run(data, initial, config, &mut rng) {
            Ok(outcome) => return Some(outcome),
            Err(Error::DegenerateComponent { .. }) => continue,
            Err(_) => return None,
        }
    }
    None
}

/// Fits the model by multi-start EM and returns the run with the highest
/// final log-likelihood (ties broken by lowest start index).
///
/// Starts may execute concurrently; each draws from its own generator
/// stream, so the result is identical regardless of worker count.
pub fn fit(data: &Dataset, k: usize, p: usize, config: &FitConfig) -> Result<FitResult, Error> {
    if k == 0 {
        return Err(Error::InvalidData("K must be at least 1".into()));
    }
    let needed = k * (p + 2);
    if data.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            got: data.len(),
        });
    }
    let outcomes: Vec<Option<StartOutcome>> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| run_start(data, k, p, config, s))
        .collect();

    let mut best: Option<(usize, StartOutcome)> = None;
    for (index, outcome) in outcomes.into_iter().enumerate() {
        let Some(outcome) = outcome else { continue };
        let better = match &best {
            None => true,
            Some((_, current)) => {
                outcome.trace.last().expect("nonempty trace")
                    > current.trace.last().expect("nonempty trace")
            }
        };
        if better {
            best = Some((index, outcome));
        }
    }
    let Some((best_start_index, outcome)) = best else {
        return Err(Error::AllStartsFailed {
            starts: config.n_starts,
        });
    };

    let fitted = data
        .t()
        .iter()
        .map(|&t| regression_mean(t, &outcome.params))
        .collect();
    let map_labels = outcome.tau.map_labels();
    let n_iter = outcome.trace.len() - 1;
    Ok(FitResult {
        params: outcome.params,
        loglik_trace: outcome.trace,
        responsibilities: outcome.tau,
        fitted,
        map_labels,
        n_iter,
        converged: outcome.converged,
        best_start_index,
    })
}
