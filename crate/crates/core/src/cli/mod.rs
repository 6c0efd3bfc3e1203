//! The `score-forge` command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::{decompose_report, distill, sample, train_score};
pub use config::{
    DatasetConfig, DomainConfig, GeneratorConfig, OutputConfig, ProbeConfig, RunConfig, SampleConfig, ScoreConfig,
    ScoreSource, T_GRID_1000,
};

use crate::distill::Estimator;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "score-forge",
    version,
    about = "Score distillation experiments on analytic, trained or remote denoisers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides distill.estimator and clears `paired`.
    #[arg(long, global = true)]
    pub estimator: Option<Estimator>,
    /// Guidance scale for distillation and probes.
    #[arg(long = "cfg-scale", global = true)]
    pub cfg_scale: Option<f64>,
    /// Use a remote predictor at this base URL.
    #[arg(long, global = true)]
    pub remote: Option<String>,
    /// Redo a run even if the output directory holds a completed one.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Train a small conditional denoiser on the configured domain.
    TrainScore,
    /// Optimize a generator with SDS, NFSD, DDS or VSD.
    Distill,
    /// Dump δC/δD/δN fields and residual statistics over a timestep grid.
    DecomposeReport,
    /// Ancestral sampling across a sweep of guidance scales.
    Sample,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::UnknownCondition(_) => 2,
        Error::Range { .. } | Error::Training { .. } | Error::Numeric(_) | Error::Diverged { .. } => 3,
        Error::Transport(_) | Error::Protocol(_) => 4,
        Error::Io(_) | Error::Json(_) => 1,
    }
}

/// Applies command-line overrides to a loaded configuration.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(est) = cli.estimator {
        cfg.distill.estimator = est;
        cfg.paired.clear();
    }
    if let Some(s) = cli.cfg_scale {
        cfg.distill.s = Some(s);
        cfg.probe.s = s;
    }
    if let Some(url) = &cli.remote {
        apply_remote(&mut cfg, url)?;
    }
    Ok(cfg)
}

#[cfg(feature = "remote")]
fn apply_remote(cfg: &mut RunConfig, url: &str) -> Result<()> {
    cfg.score.source = ScoreSource::Remote;
    match &mut cfg.score.remote {
        Some(r) => r.endpoint = url.to_string(),
        None => {
            let shape = cfg
                .domain()?
                .map(|d| d.shape)
                .ok_or_else(|| Error::config("--remote needs score.remote.shape or a [domain] section"))?;
            cfg.score.remote = Some(crate::score::RemoteConfig::new(url, "default", shape));
        }
    }
    Ok(())
}

#[cfg(not(feature = "remote"))]
fn apply_remote(_: &mut RunConfig, _: &str) -> Result<()> {
    Err(Error::config("this build has no remote predictor support"))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = commands::output_dir(&cfg, cli.out.clone());
    match cli.command {
        Command::TrainScore => train_score(&cfg, &out, cli.force),
        Command::Distill => distill(&cfg, &out, cli.force),
        Command::DecomposeReport => decompose_report(&cfg, &out, cli.force),
        Command::Sample => sample(&cfg, &out, cli.force),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCORE_FORGE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
