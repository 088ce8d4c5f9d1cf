//! BIC computation and exhaustive grid search over `(K, p)`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::em::{fit, FitConfig, FitResult};
use crate::error::Error;
use crate::model::Dataset;
use crate::numeric::mix_seed;

/// Number of free parameters: `K (p + 3) - 1`, i.e. `K (p + 1)` polynomial
/// coefficients, `2 (K - 1)` free gate entries and the shared variance.
pub fn free_param_count(k: usize, p: usize) -> usize {
    k * (p + 3) - 1
}

/// BIC score `loglik - nu(K, p) * ln(n) / 2`; larger is better.
pub fn bic(loglik: f64, k: usize, p: usize, n: usize) -> f64 {
    loglik - free_param_count(k, p) as f64 * (n as f64).ln() / 2.0
}

/// One evaluated grid cell.
#[derive(Debug, Clone)]
pub struct BicCell {
    pub bic: f64,
    pub loglik: f64,
    pub fit: FitResult,
}

/// Outcome of [`grid_select`]: scores for every feasible cell plus the
/// winning `(K, p)` pair.
#[derive(Debug, Clone)]
pub struct BicGridResult {
    pub table: BTreeMap<(usize, usize), BicCell>,
    pub best: (usize, usize),
}

/// Fits every `(K, p)` cell of the grid and selects the BIC maximizer.
///
/// Cells with too few observations (`n < K (p + 2)`) are skipped and absent
/// from the table. Each cell derives its own seed from `(seed, K, p)`, so
/// adding cells never changes existing scores and evaluation order (or
/// concurrency) cannot matter. Ties prefer fewer free parameters, then
/// smaller `K`.
pub fn grid_select(
    data: &Dataset,
    k_range: impl IntoIterator<Item = usize>,
    p_range: impl IntoIterator<Item = usize>,
    config: &FitConfig,
) -> Result<BicGridResult, Error> {
    let ks: Vec<usize> = k_range.into_iter().collect();
    let ps: Vec<usize> = p_range.into_iter().collect();
    let mut cells = Vec::new();
    for &k in &ks {
        for &p in &ps {
            if data.len() >= k * (p + 2) {
                cells.push((k, p));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::EmptyGrid);
    }

    let n = data.len();
    let results: Vec<((usize, usize), Result<BicCell, Error>)> = cells
        .into_par_iter()
        .map(|(k, p)| {
            let cell_config = FitConfig {
                seed: mix_seed(mix_seed(config.seed, k as u64), p as u64),
                ..config.clone()
            };
            let cell = fit(data, k, p, &cell_config).map(|fit_result| {
                let loglik = fit_result.loglik();
                BicCell {
                    bic: bic(loglik, k, p, n),
                    loglik,
                    fit: fit_result,
                }
            });
            ((k, p), cell)
        })
        .collect();

    let mut table = BTreeMap::new();
    for ((k, p), cell) in results {
        match cell {
            Ok(cell) => {
                table.insert((k, p), cell);
            }
            // A cell whose every start degenerated is recorded as absent,
            // like an undersized cell.
            Err(Error::AllStartsFailed { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if table.is_empty() {
        return Err(Error::EmptyGrid);
    }

    let mut best: Option<((usize, usize), f64)> = None;
    for (&(k, p), cell) in &table {
        let better = match best {
            None => true,
            Some(((bk, bp), best_bic)) => {
                cell.bic > best_bic
                    || (cell.bic == best_bic
                        && (free_param_count(k, p), k) < (free_param_count(bk, bp), bk))
            }
        };
        if better {
            best = Some(((k, p), cell.bic));
        }
    }
    let best = best.expect("table is nonempty").0;
    Ok(BicGridResult { table, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_quadratic(n: usize) -> Dataset {
        let ts: Vec<f64> = (0..n).map(|i| 5.0 * i as f64 / (n - 1) as f64).collect();
        let xs: Vec<f64> = ts.iter().map(|&t| 1.0 - 2.0 * t + 0.8 * t * t).collect();
        Dataset::new(ts, xs).unwrap()
    }

    #[test]
    fn free_param_count_examples() {
        assert_eq!(free_param_count(4, 2), 19);
        assert_eq!(free_param_count(1, 0), 2);
        assert_eq!(free_param_count(5, 3), 29);
    }

    #[test]
    fn free_param_count_matches_structural_identity() {
        for k in 1..=10 {
            for p in 0..=10 {
                assert_eq!(free_param_count(k, p), k * (p + 1) + 2 * (k - 1) + 1);
            }
        }
    }

    #[test]
    fn bic_evaluates_the_penalty() {
        let value = bic(-100.0, 4, 2, 500);
        let expected = -100.0 - 19.0 * (500.0f64).ln() / 2.0;
        assert!((value - expected).abs() < 1e-12);
        assert!((expected - (-159.038776935010813)).abs() < 1e-9);
        // intercept-only model: penalty is exactly ln(n)
        assert!((bic(0.0, 1, 0, 7) - (-(7.0f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn bic_penalty_is_monotone_in_complexity() {
        let loglik = -42.0;
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let value = bic(loglik, k, 2, 200);
            assert!(value < last);
            last = value;
        }
    }

    #[test]
    fn singleton_grid_selects_its_only_cell() {
        let data = noiseless_quadratic(30);
        let result = grid_select(&data, [1], [0], &FitConfig::with_seed(1)).unwrap();
        assert_eq!(result.best, (1, 0));
        assert_eq!(result.table.len(), 1);
    }

    #[test]
    fn undersized_cells_are_skipped_and_empty_grid_errors() {
        let data = noiseless_quadratic(9);
        // K=3, p=2 needs 12 points; K=2, p=2 needs 8.
        let result = grid_select(&data, [2, 3], [2], &FitConfig::with_seed(1)).unwrap();
        assert!(result.table.contains_key(&(2, 2)));
        assert!(!result.table.contains_key(&(3, 2)));
        assert!(matches!(
            grid_select(&data, [5, 6], [2], &FitConfig::with_seed(1)),
            Err(Error::EmptyGrid)
        ));
    }

    #[test]
    fn penalty_prefers_one_component_on_a_pure_polynomial() {
        let data = noiseless_quadratic(60);
        let config = FitConfig {
            n_starts: 3,
            ..FitConfig::with_seed(7)
        };
        let result = grid_select(&data, [1, 2], [1, 2, 3], &config).unwrap();
        assert_eq!(
            result.best.0,
            1,
            "table: {:?}",
            result
                .table
                .iter()
                .map(|(k, c)| (*k, c.bic))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn nested_grids_share_cell_scores() {
        let data = noiseless_quadratic(40);
        let config = FitConfig {
            n_starts: 2,
            ..FitConfig::with_seed(3)
        };
        let small = grid_select(&data, [1, 2], [1], &config).unwrap();
        let large = grid_select(&data, [1, 2, 3], [1, 2], &config).unwrap();
        for (key, cell) in &small.table {
            let other = &large.table[key];
            assert_eq!(cell.bic, other.bic, "cell {key:?} changed");
            assert_eq!(cell.loglik, other.loglik);
        }
    }

    #[test]
    fn grid_select_is_deterministic() {
        let data = noiseless_quadratic(40);
        let config = FitConfig {
            n_starts: 2,
            ..FitConfig::with_seed(11)
        };
        let a = grid_select(&data, [1, 2], [1, 2], &config).unwrap();
        let b = grid_select(&data, [1, 2], [1, 2], &config).unwrap();
        assert_eq!(a.best, b.best);
        for (key, cell) in &a.table {
            assert_eq!(cell.bic, b.table[key].bic);
        }
    }
}
