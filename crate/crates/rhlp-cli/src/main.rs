//! Command-line surface: fit models on CSV data, generate scenario data,
//! run benchmark sweeps and BIC selection.
//!
//! Exit codes: 0 success, 2 input parse error, 3 fit failure, 4 violated
//! precondition (bad scenario id, too few points, empty grid), 1 other I/O.

mod csvio;
mod document;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rhlp::baselines::{fit_hmm_regression, hmm_filter, PiecewiseFit};
use rhlp::confidence::{confidence_band, ConfidenceBand};
use rhlp::model::{gate_proportions, params_to_original_time, poly_to_original_time, TimeScale};
use rhlp::selection::grid_select;
use rhlp::simulation::{bic_study, generate, sweep, Method, Scenario};
use rhlp::{Dataset, Error, FitConfig};

use document::{ModelDocument, ModelParameters};

#[derive(Debug)]
pub enum CliError {
    Parse { line: Option<usize>, message: String },
    FitFailed(String),
    Precondition(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::FitFailed(_) => 3,
            CliError::Precondition(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse {
                line: Some(line),
                message,
            } => write!(f, "line {line}: {message}"),
            CliError::Parse { line: None, message } => write!(f, "{message}"),
            CliError::FitFailed(message) => write!(f, "fit failed: {message}"),
            CliError::Precondition(message) => write!(f, "{message}"),
            CliError::Io(message) => write!(f, "{message}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::AllStartsFailed { .. } | Error::DegenerateComponent { .. } => {
                CliError::FitFailed(e.to_string())
            }
            _ => CliError::Precondition(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "rhlp", version, about = "Regression with a hidden logistic process")]
struct Cli {
    /// Base RNG seed; every command is deterministic given it.
    #[arg(long, global = true, env = "RHLP_SEED", default_value_t = 0)]
    seed: u64,

    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Rhlp,
    Piecewise,
    Hmm,
}

impl MethodArg {
    fn to_method(self) -> Method {
        match self {
            MethodArg::Rhlp => Method::Rhlp,
            MethodArg::Piecewise => Method::Piecewise,
            MethodArg::Hmm => Method::Hmm,
        }
    }
}

/// Stopping rules shared by every fitting command.
#[derive(Args, Clone)]
struct FitOptions {
    /// Independent random starts per fit.
    #[arg(long, default_value_t = 10)]
    starts: usize,

    /// Relative log-likelihood tolerance of the outer EM loop.
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,

    #[arg(long, default_value_t = 1000)]
    em_max_iter: usize,

    /// Relative tolerance of the inner gate solver.
    #[arg(long, default_value_t = 1e-6)]
    irls_tol: f64,

    #[arg(long, default_value_t = 50)]
    irls_max_iter: usize,

    /// Cap the inner solver's iterations (generalized EM mode).
    #[arg(long)]
    gem_irls_cap: Option<usize>,
}

impl FitOptions {
    fn to_config(&self, seed: u64) -> Result<FitConfig, CliError> {
        if self.starts == 0 || self.em_max_iter == 0 || self.irls_max_iter == 0 {
            return Err(CliError::Precondition(
                "starts and iteration caps must be at least 1".into(),
            ));
        }
        if !(self.em_tol > 0.0) || !(self.irls_tol > 0.0) {
            return Err(CliError::Precondition("tolerances must be positive".into()));
        }
        Ok(FitConfig {
            n_starts: self.starts,
            em_tol: self.em_tol,
            em_max_iter: self.em_max_iter,
            irls_tol: self.irls_tol,
            irls_max_iter: self.irls_max_iter,
            seed,
            gem_irls_cap: self.gem_irls_cap,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV of `t,x` pairs.
    Fit {
        #[arg(long)]
        input: PathBuf,

        #[arg(long, value_enum, default_value_t = MethodArg::Rhlp)]
        method: MethodArg,

        /// Number of regime components.
        #[arg(short, long)]
        k: usize,

        /// Polynomial degree of each component.
        #[arg(short, long)]
        p: usize,

        /// Also write a confidence band at level 1 - ALPHA (rhlp only).
        #[arg(long, value_name = "ALPHA")]
        band: Option<f64>,

        /// Fit on time rescaled to [0, 1]; parameters are reported in the
        /// original scale.
        #[arg(long)]
        normalize_time: bool,

        /// Output path prefix; defaults to the input path minus extension.
        #[arg(long)]
        out_prefix: Option<PathBuf>,

        #[command(flatten)]
        fit_options: FitOptions,
    },

    /// Generate synthetic data from a reference scenario.
    Simulate {
        /// Scenario id: 1, 2 or 3.
        #[arg(long)]
        scenario: u8,

        #[arg(long, default_value_t = 500)]
        n: usize,

        #[arg(long, default_value_t = 1.5)]
        sigma: f64,

        #[arg(long)]
        out: PathBuf,
    },

    /// Sweep scenarios, sizes and noise levels over the estimators.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u8, 2, 3])]
        scenarios: Vec<u8>,

        #[arg(long, value_delimiter = ',', default_values_t = vec![100usize, 300, 500, 1000])]
        sizes: Vec<usize>,

        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 1.5, 2.0, 2.5])]
        sigmas: Vec<f64>,

        #[arg(long, value_enum, value_delimiter = ',',
              default_values_t = vec![MethodArg::Rhlp, MethodArg::Piecewise, MethodArg::Hmm])]
        methods: Vec<MethodArg>,

        #[arg(long, default_value_t = 10)]
        replicates: usize,

        #[arg(long)]
        out: PathBuf,

        #[command(flatten)]
        fit_options: FitOptions,
    },

    /// Choose (K, p) by BIC over a grid, or tabulate selections over fresh
    /// simulated replicates with --study.
    Select {
        /// Input CSV; omit when running --study.
        #[arg(long, required_unless_present = "study")]
        input: Option<PathBuf>,

        #[arg(long, default_value_t = 1)]
        k_min: usize,

        #[arg(long, default_value_t = 5)]
        k_max: usize,

        #[arg(long, default_value_t = 0)]
        p_min: usize,

        #[arg(long, default_value_t = 3)]
        p_max: usize,

        /// Run the repeated scenario-1 selection study with this many
        /// replicates instead of selecting on an input file.
        #[arg(long)]
        study: Option<usize>,

        /// Sample size for --study replicates.
        #[arg(long, default_value_t = 500)]
        n: usize,

        /// Noise level for --study replicates.
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,

        #[arg(long)]
        out: PathBuf,

        #[command(flatten)]
        fit_options: FitOptions,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit {
            input,
            method,
            k,
            p,
            band,
            normalize_time,
            out_prefix,
            fit_options,
        } => cmd_fit(
            &input,
            method,
            k,
            p,
            band,
            normalize_time,
            out_prefix,
            &fit_options.to_config(cli.seed)?,
        ),
        Command::Simulate {
            scenario,
            n,
            sigma,
            out,
        } => cmd_simulate(scenario, n, sigma, cli.seed, &out),
        Command::Benchmark {
            scenarios,
            sizes,
            sigmas,
            methods,
            replicates,
            out,
            fit_options,
        } => cmd_benchmark(
            &scenarios,
            &sizes,
            &sigmas,
            &methods,
            replicates,
            cli.seed,
            &out,
            &fit_options.to_config(cli.seed)?,
        ),
        Command::Select {
            input,
            k_min,
            k_max,
            p_min,
            p_max,
            study,
            n,
            sigma,
            out,
            fit_options,
        } => cmd_select(
            input.as_deref(),
            (k_min, k_max),
            (p_min, p_max),
            study,
            n,
            sigma,
            &out,
            &fit_options.to_config(cli.seed)?,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    input: &Path,
    method: MethodArg,
    k: usize,
    p: usize,
    band: Option<f64>,
    normalize_time: bool,
    out_prefix: Option<PathBuf>,
    config: &FitConfig,
) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Precondition("K must be at least 1".into()));
    }
    if let Some(alpha) = band {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Precondition(format!(
                "band level must be in (0, 1), got {alpha}"
            )));
        }
        if method != MethodArg::Rhlp {
            return Err(CliError::Precondition(
                "--band requires --method rhlp".into(),
            ));
        }
    }

    let raw = csvio::read_dataset(input)?;
    let scale = normalize_time.then(|| TimeScale::unit_interval(&raw));
    let data = match &scale {
        Some(s) => Dataset::new(raw.t().iter().map(|&t| s.normalize(t)).collect(), raw.x().to_vec())
            .map_err(|e| CliError::Precondition(e.to_string()))?,
        None => raw.clone(),
    };

    let prefix = out_prefix.unwrap_or_else(|| input.with_extension(""));
    let model_path = path_with_suffix(&prefix, "model.json");
    let curves_path = path_with_suffix(&prefix, "curves.csv");

    match method {
        MethodArg::Rhlp => {
            let result = rhlp::fit(&data, k, p, config)?;
            let report_params = match &scale {
                Some(s) => params_to_original_time(&result.params, s),
                None => result.params.clone(),
            };
            let doc = ModelDocument {
                schema_version: 1,
                method: "rhlp".into(),
                k,
                p,
                parameters: ModelParameters::Rhlp {
                    w: report_params
                        .w
                        .matrix()
                        .row_iter()
                        .map(|r| r.iter().cloned().collect())
                        .collect(),
                    beta: report_params
                        .beta
                        .row_iter()
                        .map(|r| r.iter().cloned().collect())
                        .collect(),
                    sigma2: report_params.sigma2,
                },
                loglik: result.loglik(),
                n_iter: result.n_iter,
                seed: config.seed,
                converged: result.converged,
            };
            write_text(&model_path, &document::render(&doc))?;

            let pis: Vec<Vec<f64>> = data
                .t()
                .iter()
                .map(|&t| gate_proportions(t, &result.params.w).iter().cloned().collect())
                .collect();
            csvio::write_curves(&curves_path, &raw, &result.fitted, &result.map_labels, &pis)?;

            if let Some(alpha) = band {
                let band_path = path_with_suffix(&prefix, "band.csv");
                let computed = confidence_band(data.t(), &data, &result.params, alpha);
                // report on the original time axis
                let band_out = ConfidenceBand {
                    ts: raw.t().to_vec(),
                    ..computed
                };
                csvio::write_band(&band_path, &band_out)?;
                println!("wrote {}", band_path.display());
            }
            println!("loglik {:.6}, {} iterations, converged: {}", doc.loglik, doc.n_iter, doc.converged);
        }
        MethodArg::Piecewise => {
            let fit = rhlp::baselines::fit_piecewise_dp(&data, k, p)?;
            let doc = piecewise_document(&fit, k, p, scale.as_ref(), config.seed, data.len());
            write_text(&model_path, &document::render(&doc))?;
            let labels: Vec<usize> = (0..data.len()).map(|i| fit.segment_of(i)).collect();
            let pis: Vec<Vec<f64>> = labels
                .iter()
                .map(|&s| {
                    let mut row = vec![0.0; k];
                    row[s] = 1.0;
                    row
                })
                .collect();
            csvio::write_curves(&curves_path, &raw, &fit.fitted, &labels, &pis)?;
            println!("sse {:.6}, boundaries {:?}", fit.sse, fit.boundaries);
        }
        MethodArg::Hmm => {
            let fit = fit_hmm_regression(&data, k, p, config)?;
            let (omega, _) = hmm_filter(&data, &fit.params)?;
            let predictions = rhlp::baselines::hmm_filter_predict(&data, &fit.params)?;
            let beta_rows: Vec<Vec<f64>> = match &scale {
                Some(s) => (0..k)
                    .map(|c| {
                        let coeffs: Vec<f64> = fit.params.beta.row(c).iter().cloned().collect();
                        poly_to_original_time(&coeffs, s)
                    })
                    .collect(),
                None => fit
                    .params
                    .beta
                    .row_iter()
                    .map(|r| r.iter().cloned().collect())
                    .collect(),
            };
            let doc = ModelDocument {
                schema_version: 1,
                method: "hmm".into(),
                k,
                p,
                parameters: ModelParameters::Hmm {
                    initial: fit.params.initial.iter().cloned().collect(),
                    trans: fit
                        .params
                        .trans
                        .row_iter()
                        .map(|r| r.iter().cloned().collect())
                        .collect(),
                    beta: beta_rows,
                    sigma2: fit.params.sigma2,
                },
                loglik: fit.loglik(),
                n_iter: fit.n_iter,
                seed: config.seed,
                converged: fit.converged,
            };
            write_text(&model_path, &document::render(&doc))?;
            let labels: Vec<usize> = (0..data.len())
                .map(|i| {
                    let mut best = 0;
                    for s in 1..k {
                        if omega[(i, s)] > omega[(i, best)] {
                            best = s;
                        }
                    }
                    best
                })
                .collect();
            let pis: Vec<Vec<f64>> = (0..data.len())
                .map(|i| (0..k).map(|s| omega[(i, s)]).collect())
                .collect();
            csvio::write_curves(&curves_path, &raw, &predictions, &labels, &pis)?;
            println!("loglik {:.6}, {} iterations, converged: {}", doc.loglik, doc.n_iter, doc.converged);
        }
    }
    println!("wrote {}", model_path.display());
    println!("wrote {}", curves_path.display());
    Ok(())
}

fn piecewise_document(
    fit: &PiecewiseFit,
    k: usize,
    p: usize,
    scale: Option<&TimeScale>,
    seed: u64,
    n: usize,
) -> ModelDocument {
    let beta_rows: Vec<Vec<f64>> = match scale {
        Some(s) => (0..k)
            .map(|c| {
                let coeffs: Vec<f64> = fit.beta.row(c).iter().cloned().collect();
                poly_to_original_time(&coeffs, s)
            })
            .collect(),
        None => fit.beta.row_iter().map(|r| r.iter().cloned().collect()).collect(),
    };
    // Gaussian profile log-likelihood at the MLE variance sse / n.
    let sigma2 = (fit.sse / n as f64).max(1e-12);
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    ModelDocument {
        schema_version: 1,
        method: "piecewise".into(),
        k,
        p,
        parameters: ModelParameters::Piecewise {
            boundaries: fit.boundaries.clone(),
            beta: beta_rows,
            sse: fit.sse,
        },
        loglik,
        n_iter: 0,
        seed,
        converged: true,
    }
}

fn cmd_simulate(scenario: u8, n: usize, sigma: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let scenario = Scenario::from_id(scenario)
        .ok_or_else(|| CliError::Precondition(format!("unknown scenario id {scenario}")))?;
    if n < 2 {
        return Err(CliError::Precondition("n must be at least 2".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::Precondition("sigma must be nonnegative".into()));
    }
    let (data, truth) = generate(scenario, n, sigma, seed);
    csvio::write_simulated(out, &data, &truth)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_benchmark(
    scenario_ids: &[u8],
    sizes: &[usize],
    sigmas: &[f64],
    methods: &[MethodArg],
    replicates: usize,
    seed: u64,
    out: &Path,
    config: &FitConfig,
) -> Result<(), CliError> {
    let mut scenarios = Vec::new();
    for &id in scenario_ids {
        scenarios.push(
            Scenario::from_id(id)
                .ok_or_else(|| CliError::Precondition(format!("unknown scenario id {id}")))?,
        );
    }
    if scenarios.is_empty() || sizes.is_empty() || sigmas.is_empty() || methods.is_empty() {
        return Err(CliError::Precondition("all sweep axes must be nonempty".into()));
    }
    if replicates == 0 {
        return Err(CliError::Precondition("replicates must be at least 1".into()));
    }
    if let Some(&bad) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(CliError::Precondition(format!("invalid sigma {bad}")));
    }
    let methods: Vec<Method> = methods.iter().map(|m| m.to_method()).collect();
    let records = sweep(&scenarios, sizes, sigmas, &methods, replicates, config, seed);
    csvio::write_benchmark(out, &records)?;

    // mean EQM per cell, failures counted separately
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(u8, &str, usize, u64), (f64, usize, usize)> = BTreeMap::new();
    for r in &records {
        let entry = cells
            .entry((r.scenario, r.method.name(), r.n, r.sigma.to_bits()))
            .or_insert((0.0, 0, 0));
        match r.eqm {
            Some(v) => {
                entry.0 += v;
                entry.1 += 1;
            }
            None => entry.2 += 1,
        }
    }
    println!("scenario method n sigma mean_eqm failures");
    for ((scenario, method, n, sigma_bits), (sum, ok, failures)) in cells {
        let mean = if ok > 0 { (sum / ok as f64).to_string() } else { "-".into() };
        println!(
            "{scenario} {method} {n} {} {mean} {failures}",
            f64::from_bits(sigma_bits)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_select(
    input: Option<&Path>,
    (k_min, k_max): (usize, usize),
    (p_min, p_max): (usize, usize),
    study: Option<usize>,
    n: usize,
    sigma: f64,
    out: &Path,
    config: &FitConfig,
) -> Result<(), CliError> {
    if k_min == 0 || k_min > k_max || p_min > p_max {
        return Err(CliError::Precondition(format!(
            "invalid grid: K in [{k_min}, {k_max}], p in [{p_min}, {p_max}]"
        )));
    }

    if let Some(replicates) = study {
        if replicates == 0 {
            return Err(CliError::Precondition("study replicates must be at least 1".into()));
        }
        let table = bic_study(
            n,
            sigma,
            replicates,
            k_min..=k_max,
            p_min..=p_max,
            config,
            config.seed,
        )?;
        csvio::write_frequency_table(out, &table)?;
        println!("K p percent");
        for (&(k, p), &percent) in &table {
            println!("{k} {p} {percent:.1}");
        }
        let winner = table
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty table");
        println!("modal selection: K={} p={}", winner.0 .0, winner.0 .1);
        println!("wrote {}", out.display());
        return Ok(());
    }

    let input = input.expect("clap enforces input unless --study");
    let data = csvio::read_dataset(input)?;
    let result = grid_select(&data, k_min..=k_max, p_min..=p_max, config)?;
    csvio::write_selection_table(out, &result)?;
    println!("K p loglik bic");
    for (&(k, p), cell) in &result.table {
        println!("{k} {p} {:.4} {:.4}", cell.loglik, cell.bic);
    }
    println!("selected: K={} p={}", result.best.0, result.best.1);
    println!("wrote {}", out.display());
    Ok(())
}

fn path_with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
