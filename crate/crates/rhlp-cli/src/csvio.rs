//! CSV ingestion and the plot-ready output files.
//!
//! Input contract: header `t,x`, decimal-point floats, `#` comment lines
//! ignored; violations are reported with their 1-based line number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rhlp::confidence::ConfidenceBand;
use rhlp::simulation::BenchmarkRecord;
use rhlp::Dataset;

use crate::CliError;

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Parse {
        line: None,
        message: format!("cannot open {}: {e}", path.display()),
    })?;
    let reader = BufReader::new(file);
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    let mut header_seen = false;
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|e| CliError::Parse {
            line: Some(line_no),
            message: format!("read error: {e}"),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if !header_seen {
            if fields != ["t", "x"] {
                return Err(CliError::Parse {
                    line: Some(line_no),
                    message: format!("expected header 't,x', found '{trimmed}'"),
                });
            }
            header_seen = true;
            continue;
        }
        if fields.len() != 2 {
            return Err(CliError::Parse {
                line: Some(line_no),
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let mut parsed = [0.0; 2];
        for (slot, (name, raw)) in parsed
            .iter_mut()
            .zip([("t", fields[0]), ("x", fields[1])])
        {
            let value: f64 = raw.parse().map_err(|_| CliError::Parse {
                line: Some(line_no),
                message: format!("cannot parse {name} value '{raw}'"),
            })?;
            if !value.is_finite() {
                return Err(CliError::Parse {
                    line: Some(line_no),
                    message: format!("{name} value '{raw}' is not finite"),
                });
            }
            *slot = value;
        }
        ts.push(parsed[0]);
        xs.push(parsed[1]);
    }
    if !header_seen {
        return Err(CliError::Parse {
            line: None,
            message: "empty input: missing 't,x' header".into(),
        });
    }
    if ts.is_empty() {
        return Err(CliError::Parse {
            line: None,
            message: "no data rows after the header".into(),
        });
    }
    Dataset::new(ts, xs).map_err(|e| CliError::Parse {
        line: None,
        message: e.to_string(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// `t,x,truth` rows for simulated data.
pub fn write_simulated(path: &Path, data: &Dataset, truth: &[f64]) -> Result<(), CliError> {
    let mut out = create(path)?;
    writeln!(out, "t,x,truth").map_err(io_err)?;
    for i in 0..data.len() {
        writeln!(out, "{},{},{}", data.t()[i], data.x()[i], truth[i]).map_err(io_err)?;
    }
    Ok(())
}

/// `t,x,fitted,map_label,pi_1..pi_K`; labels are 1-based, `pis` holds one
/// row of per-component weights per observation.
pub fn write_curves(
    path: &Path,
    data: &Dataset,
    fitted: &[f64],
    labels: &[usize],
    pis: &[Vec<f64>],
) -> Result<(), CliError> {
    let mut out = create(path)?;
    let k = pis.first().map_or(0, Vec::len);
    let mut header = String::from("t,x,fitted,map_label");
    for c in 1..=k {
        header.push_str(&format!(",pi_{c}"));
    }
    writeln!(out, "{header}").map_err(io_err)?;
    for i in 0..data.len() {
        let mut row = format!(
            "{},{},{},{}",
            data.t()[i],
            data.x()[i],
            fitted[i],
            labels[i] + 1
        );
        for value in &pis[i] {
            row.push_str(&format!(",{value}"));
        }
        writeln!(out, "{row}").map_err(io_err)?;
    }
    Ok(())
}

/// `t,center,lower,upper` rows of a confidence band.
pub fn write_band(path: &Path, band: &ConfidenceBand) -> Result<(), CliError> {
    let mut out = create(path)?;
    writeln!(out, "t,center,lower,upper").map_err(io_err)?;
    let lower = band.lower();
    let upper = band.upper();
    for i in 0..band.ts.len() {
        writeln!(
            out,
            "{},{},{},{}",
            band.ts[i], band.center[i], lower[i], upper[i]
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Benchmark records, one CSV row per (scenario, method, n, sigma, replicate).
pub fn write_benchmark(path: &Path, records: &[BenchmarkRecord]) -> Result<(), CliError> {
    let mut out = create(path)?;
    writeln!(out, "scenario,method,n,sigma,replicate,seed,eqm,wall_seconds,failed").map_err(io_err)?;
    for r in records {
        let eqm = r.eqm.map_or(String::new(), |v| v.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.method.name(),
            r.n,
            r.sigma,
            r.replicate,
            r.seed,
            eqm,
            r.wall_seconds,
            r.failed
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// `K,p,percent` frequency rows of a BIC selection study.
pub fn write_frequency_table(
    path: &Path,
    table: &std::collections::BTreeMap<(usize, usize), f64>,
) -> Result<(), CliError> {
    let mut out = create(path)?;
    writeln!(out, "K,p,percent").map_err(io_err)?;
    for (&(k, p), &percent) in table {
        writeln!(out, "{k},{p},{percent}").map_err(io_err)?;
    }
    Ok(())
}

/// `K,p,loglik,bic` rows of a selection grid.
pub fn write_selection_table(
    path: &Path,
    result: &rhlp::selection::BicGridResult,
) -> Result<(), CliError> {
    let mut out = create(path)?;
    writeln!(out, "K,p,loglik,bic").map_err(io_err)?;
    for (&(k, p), cell) in &result.table {
        writeln!(out, "{k},{p},{},{}", cell.loglik, cell.bic).map_err(io_err)?;
    }
    Ok(())
}
