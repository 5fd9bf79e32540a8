//! `amber-afno` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure (including divergence), 3 file system or file format problems.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use amber_afno::{Error, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "amber-afno", version, about = "3D segmentation with Fourier-domain token mixing")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed for initialization, shuffling and phantoms.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the full default configuration as TOML.
    PrintConfig,
    /// Write synthetic phantoms and a hashed manifest.
    GenData {
        /// Number of phantoms (overrides `data.samples`).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model; writes checkpoints, a log and a report.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Dataset directory (overrides `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint (or saved predictions) against a dataset.
    Eval {
        /// Checkpoint directory; its stored config is used unless --config is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score masks stored here instead of running inference.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Closed-form parameter and FLOP counts per layer.
    Stats {
        /// Input extent as DxHxW (defaults to `model.input_shape`).
        #[arg(long)]
        input: Option<String>,
    },
    /// Forward and forward+backward wall time over a sweep of input shapes.
    Bench {
        /// Comma-separated DxHxW shapes.
        #[arg(long)]
        shapes: Option<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Input(_) | Error::Diverged { .. } => 2,
            Error::Format(_) | Error::Io { .. } => 3,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reads the config file (if any) and applies flag overrides.
pub fn load_config(args: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::validation(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.data.phantom.seed = seed;
    }
    if let Some(p) = &args.precision {
        cfg.precision = p.parse().map_err(|_| CliError::validation(format!("precision: {p}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match cli.command {
        Command::PrintConfig => commands::print_config(g),
        Command::GenData { samples } => commands::gen_data(g, samples),
        Command::Train { epochs, max_steps, lr, data } => commands::train(g, epochs, max_steps, lr, data),
        Command::Eval { checkpoint, data, pred_dir } => commands::eval(g, checkpoint, data, pred_dir),
        Command::Stats { input } => commands::stats(g, input),
        Command::Bench { shapes, reps } => commands::bench(g, shapes, reps),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::config("x")).code, 1);
        assert_eq!(CliError::from(Error::Diverged { step: 3, loss: f64::NAN }).code, 2);
        assert_eq!(CliError::from(Error::format("x")).code, 3);
    }

    #[test]
    fn flags_override_file() {
        let args = GlobalArgs { config: None, out: Some("o".into()), seed: Some(9), precision: Some("64".into()) };
        let cfg = load_config(&args).unwrap();
        assert_eq!(cfg.precision, 64);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.data.phantom.seed, 9);
        assert_eq!(cfg.output_dir, PathBuf::from("o"));
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }
}
