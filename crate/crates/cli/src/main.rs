//! `frechet-risk`: batch front end for barycenters, risk measures, allocation
//! and the premium robustness study.
//!
//! Exit status is 0 on success, 1 when an input is invalid and 2 when a
//! computation fails numerically. Errors go to stderr as one JSON line.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use frechet_risk::allocation::{allocate_numeric, allocate_perturbative, DEFAULT_EPSILON};
use frechet_risk::barycenter::{kl_barycenter, ls_wasserstein_barycenter, quantile_barycenter};
use frechet_risk::entropic::{entropic_risk, entropic_risk_direct};
use frechet_risk::io::{read_mapping, read_portfolio, read_prior_set, read_study_config};
use frechet_risk::premia::run_robustness_study;
use frechet_risk::risk1d::{risk_1d, MethodChoice};
use frechet_risk::risk_ls::{risk_ls, LsMethod, LsOptions};
use frechet_risk::{validate_prior_set, AnyPriorSet, Error, GridDensityModel, LocationScatterModel, PriorSet, QuantileModel};

use output::{Format, Output};

const THREADS_VAR: &str = "FRECHET_RISK_THREADS";

#[derive(Parser, Debug)]
#[command(name = "frechet-risk", version, about = "Convex risk measures under multi-prior model uncertainty")]
struct Cli {
    /// Seed for every random draw; echoed in the report.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the report here (atomically) instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format. Defaults to csv for `study`, json otherwise.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fréchet mean of a prior set (Wasserstein or KL, by model kind).
    Barycenter {
        #[arg(long)]
        priors: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
    },
    /// Wasserstein barycentric risk of one risk factor, from quantile models.
    Risk1d {
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value = "auto")]
        method: MethodChoice,
    },
    /// Wasserstein barycentric risk over location-scatter models.
    Riskls {
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value = "auto")]
        method: LsMethod,
        /// Monte Carlo draws for mappings without exact moments.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Weighted-entropic risk over gridded densities.
    Entropic {
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = EntropicMethod::Closed)]
        method: EntropicMethod,
    },
    /// Euler allocation of portfolio risk to sectors.
    Allocate {
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        portfolio: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = AllocationMethod::Perturbative)]
        method: AllocationMethod,
        /// Step of the central differences.
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Robustness study of the compound-Poisson premium.
    Study {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured number of replications.
        #[arg(long)]
        replications: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EntropicMethod {
    Closed,
    Direct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AllocationMethod {
    Perturbative,
    Numeric,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = if e.is_validation() { "validation" } else { "numerical" };
            let line = serde_json::json!({ "error": category, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Invalid(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(format!("{THREADS_VAR}: {e}")))
}

fn load_priors(path: &Path) -> Result<AnyPriorSet, Error> {
    let ps = read_prior_set(path)?;
    validate_prior_set(&ps).into_result()?;
    Ok(ps)
}

fn wrong_kind(path: &Path, ps: &AnyPriorSet, want: &str) -> Error {
    Error::Invalid(format!("{}: expected {want} models, got {}", path.display(), ps.kind().as_str()))
}

fn quantile_priors(path: &Path) -> Result<PriorSet<QuantileModel>, Error> {
    match load_priors(path)? {
        AnyPriorSet::Quantile(p) => Ok(p),
        other => Err(wrong_kind(path, &other, "quantile")),
    }
}

fn ls_priors(path: &Path) -> Result<PriorSet<LocationScatterModel>, Error> {
    match load_priors(path)? {
        AnyPriorSet::LocationScatter(p) => Ok(p),
        other => Err(wrong_kind(path, &other, "location-scatter")),
    }
}

fn density_priors(path: &Path) -> Result<PriorSet<GridDensityModel>, Error> {
    match load_priors(path)? {
        AnyPriorSet::GridDensity(p) => Ok(p),
        other => Err(wrong_kind(path, &other, "grid-density")),
    }
}

fn ls_options(seed: u64, samples: Option<usize>) -> LsOptions {
    let defaults = LsOptions::default();
    LsOptions {
        seed,
        n_samples: samples.unwrap_or(defaults.n_samples),
        ..defaults
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let seed = cli.seed.unwrap_or(0);
    let json_default = cli.format.unwrap_or(Format::Json);
    let out = match cli.command {
        Command::Barycenter { priors, tol, max_iter } => {
            let report = match load_priors(&priors)? {
                AnyPriorSet::Quantile(p) => Output::barycenter("quantile", seed, quantile_barycenter(&p)?),
                AnyPriorSet::LocationScatter(p) => {
                    Output::barycenter("location-scatter", seed, ls_wasserstein_barycenter(&p, tol, max_iter)?)
                }
                AnyPriorSet::GridDensity(p) => Output::barycenter("grid-density", seed, kl_barycenter(&p)?),
            };
            report.render(json_default)?
        }
        Command::Risk1d { priors, mapping, gamma, method } => {
            let ps = quantile_priors(&priors)?;
            let phi = read_mapping(&mapping)?;
            Output::risk("risk1d", seed, risk_1d(&ps, &phi, gamma, method)?).render(json_default)?
        }
        Command::Riskls { priors, mapping, gamma, method, samples } => {
            let ps = ls_priors(&priors)?;
            let phi = read_mapping(&mapping)?;
            let opts = ls_options(seed, samples);
            Output::risk("riskls", seed, risk_ls(&ps, &phi, gamma, method, &opts)?).render(json_default)?
        }
        Command::Entropic { priors, mapping, gamma, method } => {
            let ps = density_priors(&priors)?;
            let phi = read_mapping(&mapping)?;
            let report = match method {
                EntropicMethod::Closed => entropic_risk(&ps, &phi, gamma)?,
                EntropicMethod::Direct => entropic_risk_direct(&ps, &phi, gamma, 1e-12)?,
            };
            Output::risk("entropic", seed, report).render(json_default)?
        }
        Command::Allocate { priors, portfolio, gamma, method, epsilon, samples } => {
            let ps = ls_priors(&priors)?;
            let sectors = read_portfolio(&portfolio)?;
            let opts = ls_options(seed, samples);
            let report = match method {
                AllocationMethod::Perturbative => allocate_perturbative(&ps, &sectors, gamma, &opts)?,
                AllocationMethod::Numeric => allocate_numeric(&ps, &sectors, gamma, epsilon, &opts)?,
            };
            Output::allocation(seed, report).render(json_default)?
        }
        Command::Study { config, replications } => {
            let mut cfg = match config {
                Some(path) => read_study_config(&path)?,
                None => Default::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(b) = replications {
                cfg.replications = b;
            }
            cfg.validate()?;
            Output::Study(run_robustness_study(&cfg)?).render(cli.format.unwrap_or(Format::Csv))?
        }
    };
    match cli.out {
        Some(path) => output::write_atomic(&path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}
