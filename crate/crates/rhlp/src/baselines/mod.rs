//! Comparison estimators: exact piecewise polynomial regression by dynamic
//! programming, and HMM regression fitted by Baum-Welch with filtering
//! predictions.

mod hmm;
mod piecewise;

pub use hmm::{
    fit_hmm_regression, fit_hmm_regression_with_topology, hmm_filter, hmm_filter_predict, HmmFit,
    HmmRegParams, HmmTopology,
};
pub use piecewise::{fit_piecewise_dp, piecewise_predict, PiecewiseFit};
