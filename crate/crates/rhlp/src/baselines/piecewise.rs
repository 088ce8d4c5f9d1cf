//! Piecewise polynomial regression solved exactly by dynamic programming.
//!
//! The classic two-table scheme: an `O(n^2)` segment-cost table (per-segment
//! ordinary least squares through prefix sums of monomial moments) and an
//! `O(K n^2)` recursion over boundary placements with a minimum segment
//! length of `p + 2` points.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::model::Dataset;
use crate::numeric::solve_spd_with_ridge;

/// Globally optimal segmentation into `K` polynomial segments.
#[derive(Debug, Clone)]
pub struct PiecewiseFit {
    /// `K - 1` interior change indices, strictly increasing; each index is
    /// the first point of the segment to its right.
    pub boundaries: Vec<usize>,
    /// Per-segment polynomial coefficients, `K x (p + 1)`.
    pub beta: DMatrix<f64>,
    /// Total squared error of the fitted sequence.
    pub sse: f64,
    /// Per-point prediction from the segment containing each point.
    pub fitted: Vec<f64>,
    ts: Vec<f64>,
}

impl PiecewiseFit {
    /// Segment index (0-based) containing observation `i`.
    pub fn segment_of(&self, i: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= i)
    }
}

/// Prediction at observation `index`, recomputed from the segment's
/// polynomial. Boundary points belong to the right segment.
pub fn piecewise_predict(fit: &PiecewiseFit, index: usize) -> f64 {
    let segment = fit.segment_of(index);
    let t = fit.ts[index];
    let mut value = 0.0;
    let mut power = 1.0;
    for j in 0..fit.beta.ncols() {
        value += fit.beta[(segment, j)] * power;
        power *= t;
    }
    value
}

/// Prefix sums of the monomial moments needed for any segment's normal
/// equations: `sum t^r` for `r <= 2p`, `sum t^r x` for `r <= p`, `sum x^2`.
struct MomentTable {
    t_moments: Vec<Vec<f64>>,
    tx_moments: Vec<Vec<f64>>,
    xx: Vec<f64>,
    p: usize,
}

impl MomentTable {
    fn new(ts: &[f64], xs: &[f64], p: usize) -> Self {
        let n = ts.len();
        let mut t_moments = vec![vec![0.0; n + 1]; 2 * p + 1];
        let mut tx_moments = vec![vec![0.0; n + 1]; p + 1];
        let mut xx = vec![0.0; n + 1];
        for i in 0..n {
            let mut power = 1.0;
            for r in 0..=2 * p {
                t_moments[r][i + 1] = t_moments[r][i] + power;
                if r <= p {
                    tx_moments[r][i + 1] = tx_moments[r][i] + power * xs[i];
                }
                power *= ts[i];
            }
            xx[i + 1] = xx[i] + xs[i] * xs[i];
        }
        Self {
            t_moments,
            tx_moments,
            xx,
            p,
        }
    }

    /// OLS coefficients and squared error for the half-open segment `[a, b)`.
    fn solve_segment(&self, a: usize, b: usize) -> (DVector<f64>, f64) {
        let p = self.p;
        let mut gram = DMatrix::zeros(p + 1, p + 1);
        for r in 0..=p {
            for s in 0..=p {
                gram[(r, s)] = self.t_moments[r + s][b] - self.t_moments[r + s][a];
            }
        }
        let moment = DVector::from_iterator(
            p + 1,
            (0..=p).map(|r| self.tx_moments[r][b] - self.tx_moments[r][a]),
        );
        let coeffs = solve_spd_with_ridge(&gram, &moment);
        let xx = self.xx[b] - self.xx[a];
        let sse = xx - 2.0 * coeffs.dot(&moment) + (&gram * &coeffs).dot(&coeffs);
        (coeffs, sse.max(0.0))
    }
}

/// Minimizes total segment SSE over all placements of `K - 1` boundaries
/// with minimum segment length `p + 2`; ties pick the leftmost boundary.
pub fn fit_piecewise_dp(data: &Dataset, k: usize, p: usize) -> Result<PiecewiseFit, Error> {
    if k == 0 {
        return Err(Error::InvalidData("K must be at least 1".into()));
    }
    let n = data.len();
    let min_len = p + 2;
    let needed = k * min_len;
    if n < needed {
        return Err(Error::TooFewPoints { needed, got: n });
    }
    let ts = data.t();
    let xs = data.x();
    let moments = MomentTable::new(ts, xs, p);

    // Segment-cost table, flat (n+1)^2; only cells with b - a >= min_len
    // are ever read.
    let stride = n + 1;
    let mut cost = vec![f64::INFINITY; stride * stride];
    for a in 0..=n.saturating_sub(min_len) {
        for b in (a + min_len)..=n {
            cost[a * stride + b] = moments.solve_segment(a, b).1;
        }
    }

    // dp[j] = best cost of covering the first j points with the current
    // number of segments; back[seg][j] = chosen previous cut.
    let mut dp_prev = vec![f64::INFINITY; n + 1];
    for j in min_len..=n {
        dp_prev[j] = cost[j];
    }
    let mut back = vec![vec![usize::MAX; n + 1]; k + 1];
    for seg in 2..=k {
        let mut dp_curr = vec![f64::INFINITY; n + 1];
        for j in (seg * min_len)..=n {
            let mut best = f64::INFINITY;
            let mut best_cut = usize::MAX;
            for cut in ((seg - 1) * min_len)..=(j - min_len) {
                let prev = dp_prev[cut];
                if !prev.is_finite() {
                    continue;
                }
                let total = prev + cost[cut * stride + j];
                if total < best {
                    best = total;
                    best_cut = cut;
                }
            }
            dp_curr[j] = best;
            back[seg][j] = best_cut;
        }
        dp_prev = dp_curr;
    }

    let mut boundaries = Vec::with_capacity(k - 1);
    let mut j = n;
    for seg in (2..=k).rev() {
        let cut = back[seg][j];
        debug_assert_ne!(cut, usize::MAX, "unreachable DP state");
        boundaries.push(cut);
        j = cut;
    }
    boundaries.reverse();

    let mut beta = DMatrix::zeros(k, p + 1);
    let mut fitted = vec![0.0; n];
    let mut start = 0;
    for seg in 0..k {
        let end = if seg < k - 1 { boundaries[seg] } else { n };
        let (coeffs, _) = moments.solve_segment(start, end);
        for j in 0..=p {
            beta[(seg, j)] = coeffs[j];
        }
        for (i, &t) in ts.iter().enumerate().take(end).skip(start) {
            let mut value = 0.0;
            let mut power = 1.0;
            for c in coeffs.iter() {
                value += c * power;
                power *= t;
            }
            fitted[i] = value;
        }
        start = end;
    }
    let sse = xs
        .iter()
        .zip(&fitted)
        .map(|(&x, &f)| (x - f) * (x - f))
        .sum();

    Ok(PiecewiseFit {
        boundaries,
        beta,
        sse,
        fitted,
        ts: ts.to_vec(),
    })
}
