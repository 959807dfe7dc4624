//! `nnvecchia`: train surrogate banks, simulate fields, fit, predict and run studies.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "nnvecchia", version, about = "Vecchia Gaussian-process fitting with neural Kriging surrogates")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training fields and train the 12 networks of a bank.
    TrainSurrogate(TrainArgs),
    /// Estimate covariance parameters from a CSV of sites.
    Fit(FitArgs),
    /// Simulate a field at uniform random sites.
    Simulate(SimulateArgs),
    /// Predict at new sites from fit artifacts.
    Predict(PredictArgs),
    /// Repeated simulate-and-fit study.
    Study(StudyArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mcmc,
    Mle,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub scale: Scale,
    #[arg(long, default_value_t = 30)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Bank file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of training fields per bin.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    /// CSV with header x,y,z and optional covariate columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Surrogate bank; without it `--exact` is required.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Exact Kriging solves instead of a bank.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, value_enum, default_value = "mcmc")]
    pub mode: Mode,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Conditioning-set size; defaults to the bank's, else 30.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 12_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 2_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tune: f64,
    /// Robbins-Monro proposal scaling during burn-in.
    #[arg(long)]
    pub adapt: bool,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Rescale raw coordinates (such as longitude/latitude) to the unit square.
    #[arg(long)]
    pub lonlat: bool,
    /// Hold out this share of sites; writes train.csv and test.csv to the output directory.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Sample regression coefficients and the variance with the spatial parameters
    /// instead of regressing the covariates out first.
    #[arg(long)]
    pub hierarchical: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    /// phi,nu,r
    #[arg(long, value_parser = parse_theta, default_value = "0.1,1.5,0.9")]
    pub theta: [f64; 3],
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = nnvecchia::vecchia::SIMULATION_M)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    /// Training CSV used for the fit.
    #[arg(long)]
    pub train: PathBuf,
    /// Sites to predict: x,y plus the fit's covariates; a z column is optional.
    #[arg(long)]
    pub test: PathBuf,
    /// Output directory of `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep every this-many post-burn-in draws.
    #[arg(long, default_value_t = 50)]
    pub stride: usize,
    /// Neighbours per test site; defaults to the fit's m.
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct StudyArgs {
    /// `paper3` for the three standard settings, or `phi,nu,r` triples separated by `;`.
    #[arg(long, default_value = "paper3")]
    pub settings: String,
    #[arg(long, value_enum, default_value = "mle")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "desk")]
    pub scale: Scale,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub exact: bool,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_theta(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected phi,nu,r, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

/// Bad invocation, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::TrainSurrogate(a) => commands::train_surrogate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Study(a) => commands::study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
