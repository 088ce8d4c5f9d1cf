//! Nonlinear regression with a hidden logistic process.
//!
//! The regression function is a mixture of `K` polynomial experts whose
//! mixing proportions vary over time through a multinomial-logistic gate.
//! Parameters are estimated by maximum likelihood with an EM algorithm whose
//! M-step solves weighted least squares for the polynomial coefficients and
//! runs an inner IRLS (Newton-Raphson) solver for the gate weights.
//!
//! The crate also provides:
//! - BIC-based selection of the component count `K` and polynomial degree `p`
//! - asymptotic pointwise confidence bands for the fitted curve
//! - two baseline estimators: exact piecewise polynomial regression by
//!   dynamic programming, and HMM regression fitted by Baum-Welch
//! - a seeded simulation harness with benchmark sweeps

pub mod baselines;
pub mod confidence;
pub mod em;
mod error;
pub mod model;
mod numeric;
pub mod selection;
pub mod simulation;

pub use error::Error;
pub use model::{Dataset, GateWeights, Responsibilities, RhlpParams};
pub use em::{fit, FitConfig, FitResult};
