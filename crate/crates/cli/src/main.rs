//! Batch experiment driver for the wavecouple estimator suite.
//!
//! Exit codes: 0 success/pass, 1 verdict fail, 2 configuration error,
//! 3 estimation failure.

mod commands;
mod config;
mod output;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use output::{write_output, CommandOutput};

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { message, code: 2 }
    }

    pub fn estimation(message: String) -> Self {
        Self { message, code: 3 }
    }
}

impl From<wavecouple::Error> for CliError {
    fn from(e: wavecouple::Error) -> Self {
        match e {
            wavecouple::Error::EstimationFailure(_) => Self::estimation(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

#[derive(Parser)]
#[command(
    name = "wavecouple",
    version,
    about = "Spectral-Galerkin Monte-Carlo estimators and inequality verifiers \
             for the damped stochastic wave equation",
    after_help = "Configuration is a flat `key = value` file (see the config \
                  module docs or README); every key can be overridden with \
                  --set key=value. The WAVECOUPLE_THREADS environment variable \
                  is the fallback for --threads."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override mc.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: WAVECOUPLE_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory for result documents.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Output format for commands with time series.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one coupled trajectory pair and export the path.
    Simulate,
    /// Derivative-formula estimate vs finite differences (and the Gaussian
    /// oracle for linear drift).
    Derivative,
    /// Integration-by-parts identity: E[∇g(Z_T)] vs the weighted integrand.
    Ibp,
    /// Log-Harnack inequality verifier (entropy route + closed form).
    LogHarnack,
    /// Power-Harnack inequality verifier at the capped horizon.
    Harnack,
    /// Shift-Harnack verifier (log or power mode via harnack.mode).
    ShiftHarnack,
    /// E[R log R] against the closed-form additive cost.
    Entropy,
    /// Weighted time-integrated energy moment bound.
    Energy,
    /// Weighted exponential moment bound.
    Expmoment,
    /// Gradient-variance ratio report over a basket of unit directions.
    GradientReport,
    /// Certify the drift family's structural constants and print every
    /// bound constant.
    Constants,
    /// Invariant battery at a small preset.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Derivative => "derivative",
            Command::Ibp => "ibp",
            Command::LogHarnack => "log-harnack",
            Command::Harnack => "harnack",
            Command::ShiftHarnack => "shift-harnack",
            Command::Entropy => "entropy",
            Command::Energy => "energy",
            Command::Expmoment => "expmoment",
            Command::GradientReport => "gradient-report",
            Command::Constants => "constants",
            Command::Selftest => "selftest",
        }
    }

    fn run(&self, cfg: &ExperimentConfig) -> Result<CommandOutput, CliError> {
        match self {
            Command::Simulate => commands::simulate(cfg),
            Command::Derivative => commands::derivative(cfg),
            Command::Ibp => commands::ibp(cfg),
            Command::LogHarnack => commands::log_harnack(cfg),
            Command::Harnack => commands::harnack(cfg),
            Command::ShiftHarnack => commands::shift_harnack(cfg),
            Command::Entropy => commands::entropy(cfg),
            Command::Energy => commands::energy(cfg),
            Command::Expmoment => commands::expmoment(cfg),
            Command::GradientReport => commands::gradient_report(cfg),
            Command::Constants => commands::constants(cfg),
            Command::Selftest => commands::selftest(cfg),
        }
    }
}

fn thread_count(cli: &Cli) -> Option<usize> {
    cli.threads.or_else(|| {
        std::env::var("WAVECOUPLE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn run(cli: &Cli) -> Result<(CommandOutput, PathBuf), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::defaults(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.set("mc.seed", &seed.to_string())?;
    }

    let out = match thread_count(cli) {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
            pool.install(|| cli.command.run(&cfg))?
        }
        None => cli.command.run(&cfg)?,
    };
    let path = write_output(&cli.out_dir, cli.command.name(), &cfg, &out, cli.format)?;
    Ok((out, path))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((out, path)) => {
            let verdict = match out.verdict {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "done",
            };
            println!("{}: {verdict} ({})", cli.command.name(), path.display());
            if let Some(false) = out.verdict {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
