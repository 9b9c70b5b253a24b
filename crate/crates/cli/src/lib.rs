//! Command-line experiments for Gaussian thermostat flows.
//!
//! [`run`] executes one command against a JSON configuration, writes its
//! artifacts and a `<command>.json` report into the output directory and
//! returns the report.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::commands::{CommandOutput, Context};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{Output, Report, TOOL, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Verify,
    Orbit,
    Convexity,
    Simplicity,
    Conjugates,
    Terminator,
    Riccati,
    Xray,
    Kernel,
    Invert,
    NormalizeCurvature,
    SurjectivityDemo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Orbit => "orbit",
            Command::Convexity => "convexity",
            Command::Simplicity => "simplicity",
            Command::Conjugates => "conjugates",
            Command::Terminator => "terminator",
            Command::Riccati => "riccati",
            Command::Xray => "xray",
            Command::Kernel => "kernel",
            Command::Invert => "invert",
            Command::NormalizeCurvature => "normalize-curvature",
            Command::SurjectivityDemo => "surjectivity-demo",
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "thermoray", version, about = "Gaussian thermostat flows, Jacobi fields and ray transforms")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for random test inputs (overrides `seed` in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for parallel fans and grids.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Multiplies every tolerance (and divides lower-bound thresholds).
    #[arg(long, default_value_t = 1.0)]
    pub tolerance_scale: f64,
}

pub const DEFAULT_OUTPUT: &str = "thermoray-out";

/// Report plus where it was written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub path: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.pass {
            0
        } else {
            1
        }
    }
}

pub fn run(args: &Args) -> Result<Outcome, CliError> {
    if !(args.tolerance_scale > 0.0 && args.tolerance_scale.is_finite()) {
        return Err(CliError::config("--tolerance-scale must be positive"));
    }
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = match (&args.out, &cfg.output) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from(DEFAULT_OUTPUT),
    };
    let threads = args.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    pool.install(|| execute(args.command, &cfg, args.tolerance_scale, &dir))
}

/// Runs `command` with an already loaded configuration.
pub fn execute(
    command: Command,
    cfg: &ExperimentConfig,
    tolerance_scale: f64,
    dir: &Path,
) -> Result<Outcome, CliError> {
    let mut out = Output::new(dir)?;
    let mut ctx = Context { cfg, scale: tolerance_scale, out: &mut out };
    let CommandOutput { checks, result } = match command {
        Command::Verify => commands::verify(&mut ctx),
        Command::Orbit => commands::orbit(&mut ctx),
        Command::Convexity => commands::convexity(&mut ctx),
        Command::Simplicity => commands::simplicity(&mut ctx),
        Command::Conjugates => commands::conjugates(&mut ctx),
        Command::Terminator => commands::terminator(&mut ctx),
        Command::Riccati => commands::riccati(&mut ctx),
        Command::Xray => commands::xray(&mut ctx),
        Command::Kernel => commands::kernel(&mut ctx),
        Command::Invert => commands::invert(&mut ctx),
        Command::NormalizeCurvature => commands::normalize_curvature(&mut ctx),
        Command::SurjectivityDemo => commands::surjectivity_demo(&mut ctx),
    }?;
    let report_name = format!("{}.json", command.name());
    let artifacts = out.take_artifacts();
    debug_assert!(artifacts.iter().all(|a| a.file != report_name), "artifact shadows the report");
    let report = Report {
        tool: TOOL,
        version: VERSION,
        command: command.name().to_string(),
        config_hash: cfg.hash(),
        generator: cfg.generator.clone(),
        seed: cfg.seed,
        tolerance_scale,
        pass: checks.iter().all(|c| c.pass),
        checks,
        result,
        artifacts,
    };
    let path = out.write_json(&report_name, &report)?;
    Ok(Outcome { report, path })
}
