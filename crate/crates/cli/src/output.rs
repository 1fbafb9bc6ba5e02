use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use frechet_risk::allocation::AllocationReport;
use frechet_risk::barycenter::BarycenterResult;
use frechet_risk::premia::StudyTable;
use frechet_risk::{Error, RiskReport};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

pub enum Output {
    Barycenter {
        kind: &'static str,
        seed: u64,
        frechet_variance: f64,
        iterations: usize,
        residual: f64,
        log_c0: Option<f64>,
        result: Value,
    },
    Risk {
        command: &'static str,
        seed: u64,
        report: RiskReport,
    },
    Allocation {
        seed: u64,
        report: AllocationReport,
    },
    Study(StudyTable),
}

#[derive(Serialize)]
struct RiskRow<'a> {
    command: &'a str,
    method: &'a str,
    gamma: f64,
    value: f64,
    barycenter_expectation: Option<f64>,
    penalty: Option<f64>,
    iterations: usize,
    residual: f64,
    stderr: Option<f64>,
    seed: u64,
}

#[derive(Serialize)]
struct BarycenterRow<'a> {
    kind: &'a str,
    frechet_variance: f64,
    iterations: usize,
    residual: f64,
    log_c0: Option<f64>,
    seed: u64,
}

#[derive(Serialize)]
struct AllocationRow<'a> {
    sector: String,
    contribution: f64,
    method: &'a str,
    gamma: f64,
    seed: u64,
}

fn to_json<T: Serialize>(v: &T) -> Result<Value, Error> {
    serde_json::to_value(v).map_err(|e| Error::Numerical(format!("cannot serialize report: {e}")))
}

fn csv_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(format!("cannot write csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("cannot write csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl Output {
    pub fn barycenter<M: Serialize>(kind: &'static str, seed: u64, r: BarycenterResult<M>) -> Output {
        Output::Barycenter {
            kind,
            seed,
            frechet_variance: r.frechet_variance,
            iterations: r.iterations,
            residual: r.residual,
            log_c0: r.log_c0,
            result: serde_json::to_value(&r).unwrap_or(Value::Null),
        }
    }

    pub fn risk(command: &'static str, seed: u64, report: RiskReport) -> Output {
        Output::Risk { command, seed, report }
    }

    pub fn allocation(seed: u64, report: AllocationReport) -> Output {
        Output::Allocation { seed, report }
    }

    pub fn render(&self, format: Format) -> Result<String, Error> {
        match format {
            Format::Json => {
                let v = match self {
                    Output::Barycenter { kind, seed, result, .. } => {
                        json!({ "command": "barycenter", "kind": kind, "seed": seed, "report": result })
                    }
                    Output::Risk { command, seed, report } => json!({ "command": command, "seed": seed, "report": to_json(report)? }),
                    Output::Allocation { seed, report } => json!({ "command": "allocate", "seed": seed, "report": to_json(report)? }),
                    Output::Study(t) => to_json(t)?,
                };
                let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Numerical(e.to_string()))?;
                s.push('\n');
                Ok(s)
            }
            Format::Csv => match self {
                Output::Barycenter {
                    kind,
                    seed,
                    frechet_variance,
                    iterations,
                    residual,
                    log_c0,
                    ..
                } => csv_rows([BarycenterRow {
                    kind,
                    frechet_variance: *frechet_variance,
                    iterations: *iterations,
                    residual: *residual,
                    log_c0: *log_c0,
                    seed: *seed,
                }]),
                Output::Risk { command, seed, report } => {
                    let d = &report.diagnostics;
                    csv_rows([RiskRow {
                        command,
                        method: report.method.as_str(),
                        gamma: report.gamma,
                        value: report.value,
                        barycenter_expectation: d.barycenter_expectation,
                        penalty: d.penalty,
                        iterations: d.iterations,
                        residual: d.residual,
                        stderr: d.stderr,
                        seed: *seed,
                    }])
                }
                Output::Allocation { seed, report } => {
                    let row = |sector: String, contribution: f64| AllocationRow {
                        sector,
                        contribution,
                        method: report.method.as_str(),
                        gamma: report.gamma,
                        seed: *seed,
                    };
                    let sectors = report.contributions.iter().enumerate().map(|(j, c)| row(j.to_string(), *c));
                    csv_rows(sectors.chain([row("total".into(), report.total_risk)]))
                }
                Output::Study(t) => Ok(t.to_csv()),
            },
        }
    }
}

/// Writes through a temporary file in the target directory, so a failed run
/// never leaves a truncated report behind.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), Error> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| Error::Invalid(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents.as_bytes()).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}
