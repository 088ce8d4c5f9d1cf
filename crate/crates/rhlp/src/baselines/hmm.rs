//! HMM regression: a Markov-chain latent state with Gaussian polynomial
//! emissions, fitted by Baum-Welch (scaled forward-backward E-step, WLS
//! M-step) and predicted through filtering probabilities
//! `p(z_i = k | x_1..x_i)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{random_block_ols, wls_polyfit, FitConfig, SIGMA2_FLOOR};
use crate::error::Error;
use crate::model::Dataset;
use crate::numeric::gaussian_logpdf;

const DEGENERATE_MASS: f64 = 1e-8;
const MAX_RESTARTS: usize = 3;

/// Parameters of the K-state HMM regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmRegParams {
    /// Initial state distribution (simplex).
    pub initial: DVector<f64>,
    /// Row-stochastic transition matrix.
    pub trans: DMatrix<f64>,
    /// Per-state polynomial coefficients, `K x (p + 1)`.
    pub beta: DMatrix<f64>,
    /// Shared emission variance.
    pub sigma2: f64,
}

impl HmmRegParams {
    pub fn k(&self) -> usize {
        self.beta.nrows()
    }

    pub fn degree(&self) -> usize {
        self.beta.ncols() - 1
    }

    fn state_mean(&self, t: f64, state: usize) -> f64 {
        let mut value = 0.0;
        let mut power = 1.0;
        for j in 0..self.beta.ncols() {
            value += self.beta[(state, j)] * power;
            power *= t;
        }
        value
    }
}

/// Chain structure used at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HmmTopology {
    /// Fully connected, diagonal-dominant start (0.9 self-transition).
    #[default]
    Ergodic,
    /// Forward-only chain; zero transitions stay zero under Baum-Welch.
    LeftToRight,
}

/// Fitted HMM with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct HmmFit {
    pub params: HmmRegParams,
    pub loglik_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub best_start_index: usize,
}

impl HmmFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// Log emission densities, one row per observation.
fn emission_logpdfs(data: &Dataset, params: &HmmRegParams) -> DMatrix<f64> {
    let n = data.len();
    let k = params.k();
    DMatrix::from_fn(n, k, |i, state| {
        gaussian_logpdf(
            data.x()[i],
            params.state_mean(data.t()[i], state),
            params.sigma2,
        )
    })
}

/// Scaled forward pass. Emissions are max-shifted per step before
/// exponentiation, the shift being absorbed into the log-normalizers, so the
/// recursion never under- or overflows.
///
/// Returns the filter probabilities `alpha_hat[i][k] = p(z_i = k | x_1..x_i)`,
/// the shifted emissions, the per-step normalizers and the log-likelihood.
fn scaled_forward(
    data: &Dataset,
    params: &HmmRegParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>, f64), Error> {
    let n = data.len();
    let k = params.k();
    let logb = emission_logpdfs(data, params);
    let mut shifted = DMatrix::zeros(n, k);
    let mut alpha = DMatrix::zeros(n, k);
    let mut norms = vec![0.0; n];
    let mut loglik = 0.0;
    for i in 0..n {
        let shift = logb.row(i).max();
        for s in 0..k {
            shifted[(i, s)] = (logb[(i, s)] - shift).exp();
        }
        let mut c = 0.0;
        for s in 0..k {
            let prior = if i == 0 {
                params.initial[s]
            } else {
                (0..k).map(|j| alpha[(i - 1, j)] * params.trans[(j, s)]).sum()
            };
            let value = prior * shifted[(i, s)];
            alpha[(i, s)] = value;
            c += value;
        }
        if !(c > 0.0) {
            return Err(Error::DegenerateComponent { component: 0 });
        }
        for s in 0..k {
            alpha[(i, s)] /= c;
        }
        norms[i] = c;
        loglik += c.ln() + shift;
    }
    Ok((alpha, shifted, norms, loglik))
}

/// Filtering probabilities and the log-likelihood from the forward pass.
pub fn hmm_filter(data: &Dataset, params: &HmmRegParams) -> Result<(DMatrix<f64>, f64), Error> {
    let (alpha, _, _, loglik) = scaled_forward(data, params)?;
    Ok((alpha, loglik))
}

/// Prediction `sum_k p(z_i = k | x_1..x_i) * beta_k' basis(t_i)` per point.
pub fn hmm_filter_predict(data: &Dataset, params: &HmmRegParams) -> Result<Vec<f64>, Error> {
    let (omega, _) = hmm_filter(data, params)?;
    Ok((0..data.len())
        .map(|i| {
            (0..params.k())
                .map(|s| omega[(i, s)] * params.state_mean(data.t()[i], s))
                .sum()
        })
        .collect())
}

/// Forward-backward smoothing: per-point state posteriors, summed expected
/// transition counts and the log-likelihood.
pub(crate) fn forward_backward(
    data: &Dataset,
    params: &HmmRegParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64), Error> {
    let n = data.len();
    let k = params.k();
    let (alpha, shifted, norms, loglik) = scaled_forward(data, params)?;
    let mut beta_hat = DMatrix::zeros(n, k);
    for s in 0..k {
        beta_hat[(n - 1, s)] = 1.0;
    }
    for i in (0..n - 1).rev() {
        for j in 0..k {
            let mut value = 0.0;
            for s in 0..k {
                value += params.trans[(j, s)] * shifted[(i + 1, s)] * beta_hat[(i + 1, s)];
            }
            beta_hat[(i, j)] = value / norms[i + 1];
        }
    }
    let mut gamma = DMatrix::zeros(n, k);
    for i in 0..n {
        for s in 0..k {
            gamma[(i, s)] = alpha[(i, s)] * beta_hat[(i, s)];
        }
    }
    let mut xi_sum = DMatrix::zeros(k, k);
    for i in 0..n - 1 {
        for j in 0..k {
            for s in 0..k {
                xi_sum[(j, s)] += alpha[(i, j)] * params.trans[(j, s)] * shifted[(i + 1, s)]
                    * beta_hat[(i + 1, s)]
                    / norms[i + 1];
            }
        }
    }
    Ok((gamma, xi_sum, loglik))
}

fn m_step(data: &Dataset, gamma: &DMatrix<f64>, xi_sum: &DMatrix<f64>, p: usize) -> Result<HmmRegParams, Error> {
    let n = data.len();
    let k = gamma.ncols();

    let mut beta = DMatrix::zeros(k, p + 1);
    let mut weights = vec![0.0; n];
    for s in 0..k {
        let mut mass = 0.0;
        for (i, weight) in weights.iter_mut().enumerate() {
            *weight = gamma[(i, s)];
            mass += *weight;
        }
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateComponent { component: s });
        }
        let coeffs = wls_polyfit(data.t(), data.x(), &weights, p);
        for j in 0..=p {
            beta[(s, j)] = coeffs[j];
        }
    }

    let mut total = 0.0;
    for i in 0..n {
        let t = data.t()[i];
        let x = data.x()[i];
        for s in 0..k {
            let mut mean = 0.0;
            let mut power = 1.0;
            for j in 0..=p {
                mean += beta[(s, j)] * power;
                power *= t;
            }
            total += gamma[(i, s)] * (x - mean) * (x - mean);
        }
    }
    let sigma2 = (total / n as f64).max(SIGMA2_FLOOR);

    let mut trans = DMatrix::zeros(k, k);
    for j in 0..k {
        let den: f64 = (0..n - 1).map(|i| gamma[(i, j)]).sum();
        if den < DEGENERATE_MASS {
            return Err(Error::DegenerateComponent { component: j });
        }
        for s in 0..k {
            trans[(j, s)] = xi_sum[(j, s)] / den;
        }
        // kill floating-point drift so rows stay exactly stochastic
        let row_sum: f64 = (0..k).map(|s| trans[(j, s)]).sum();
        for s in 0..k {
            trans[(j, s)] /= row_sum;
        }
    }

    let mut initial = DVector::from_iterator(k, (0..k).map(|s| gamma[(0, s)]));
    let init_sum: f64 = initial.iter().sum();
    initial /= init_sum;

    Ok(HmmRegParams {
        initial,
        trans,
        beta,
        sigma2,
    })
}

fn initial_transitions(k: usize, topology: HmmTopology) -> DMatrix<f64> {
    let mut trans = DMatrix::zeros(k, k);
    match topology {
        HmmTopology::Ergodic => {
            for j in 0..k {
                for s in 0..k {
                    trans[(j, s)] = if j == s {
                        0.9
                    } else if k > 1 {
                        0.1 / (k - 1) as f64
                    } else {
                        0.0
                    };
                }
                if k == 1 {
                    trans[(j, j)] = 1.0;
                }
            }
        }
        HmmTopology::LeftToRight => {
            for j in 0..k {
                if j + 1 < k {
                    trans[(j, j)] = 0.9;
                    trans[(j, j + 1)] = 0.1;
                } else {
                    trans[(j, j)] = 1.0;
                }
            }
        }
    }
    trans
}

struct StartOutcome {
    params: HmmRegParams,
    trace: Vec<f64>,
    converged: bool,
}

fn baum_welch_run(
    data: &Dataset,
    initial: HmmRegParams,
    config: &FitConfig,
) -> Result<StartOutcome, Error> {
    let p = initial.degree();
    let mut params = initial;
    let (_, _, mut loglik) = forward_backward(data, &params)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    for _ in 1..=config.em_max_iter {
        let (gamma, xi_sum, _) = forward_backward(data, &params)?;
        params = m_step(data, &gamma, &xi_sum, p)?;
        let (_, _, loglik_new) = forward_backward(data, &params)?;
        trace.push(loglik_new);
        let rel = (loglik_new - loglik).abs() / loglik.abs().max(1e-300);
        loglik = loglik_new;
        if rel < config.em_tol {
            converged = true;
            break;
        }
    }
    Ok(StartOutcome {
        params,
        trace,
        converged,
    })
}

fn run_start(
    data: &Dataset,
    k: usize,
    p: usize,
    config: &FitConfig,
    topology: HmmTopology,
    start: usize,
) -> Option<StartOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(start as u64);
    for _attempt in 0..=MAX_RESTARTS {
        let (beta, sigma2, _) = random_block_ols(data, k, p, &mut rng).ok()?;
        let initial = HmmRegParams {
            initial: DVector::from_element(k, 1.0 / k as f64),
            trans: initial_transitions(k, topology),
            beta,
            sigma2,
        };
        match baum_welch_run(data, initial, config) {
            Ok(outcome) => return Some(outcome),
            Err(Error::DegenerateComponent { .. }) => continue,
            Err(_) => return None,
        }
    }
    None
}

/// Baum-Welch fit of the ergodic HMM regression model with multi-start
/// initialization and the same stopping rules as the gated model.
pub fn fit_hmm_regression(
    data: &Dataset,
    k: usize,
    p: usize,
    config: &FitConfig,
) -> Result<HmmFit, Error> {
    fit_hmm_regression_with_topology(data, k, p, config, HmmTopology::Ergodic)
}

/// [`fit_hmm_regression`] with an explicit chain topology.
pub fn fit_hmm_regression_with_topology(
    data: &Dataset,
    k: usize,
    p: usize,
    config: &FitConfig,
    topology: HmmTopology,
) -> Result<HmmFit, Error> {
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
        .map(|s| run_start(data, k, p, config, topology, s))
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
    let n_iter = outcome.trace.len() - 1;
    Ok(HmmFit {
        params: outcome.params,
        loglik_trace: outcome.trace,
        n_iter,
        converged: outcome.converged,
        best_start_index,
    })
}
