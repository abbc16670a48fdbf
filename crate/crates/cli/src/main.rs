mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drct::diagnostics::TapLevel;

use run_config::Overrides;

#[derive(Parser)]
#[command(name = "drct", version, about = "DRCT super-resolution: train, evaluate, infer, diagnose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct Common {
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `model.scale`; for checkpoint commands, must match it.
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged training plan of a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on benchmark folders (`HR/`, optional `LR_bicubic/X{s}/`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        /// Supplies `data.test` when no `--dataset` is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tta: bool,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Super-resolve PNG images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        tta: bool,
        #[arg(long, default_value = "sr")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Record a feature-intensity trace and its G-index.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// per_rdg, per_sdrcb or per_stage.
        #[arg(long, default_value = "per_rdg")]
        tap_level: TapLevel,
        /// Earlier trace file to overlay on the chart.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value = "diagnose")]
        out: PathBuf,
    },
    /// Write a freshly initialised checkpoint.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Used without --config: desk or full.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Zero every SDRCB final transition.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the configuration and parameter count of a checkpoint or config.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn overrides(&self, out: Option<PathBuf>) -> Overrides {
        Overrides {
            seed: self.seed,
            scale: self.scale,
            out,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            out,
            common,
        } => {
            commands::train(&config, &common.overrides(out), checkpoint.as_deref())?;
        }
        Command::Eval {
            checkpoint,
            datasets,
            config,
            tta,
            out,
            common,
        } => {
            let complete =
                commands::eval(&checkpoint, &datasets, config.as_deref(), common.scale, tta, &out)?;
            if !complete {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Infer {
            checkpoint,
            inputs,
            tta,
            out,
            common,
        } => {
            for path in commands::infer(&checkpoint, &inputs, common.scale, tta, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Diagnose {
            checkpoint,
            input,
            tap_level,
            compare,
            out,
        } => {
            let summary = commands::diagnose(&checkpoint, &input, tap_level, compare.as_deref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Init {
            config,
            preset,
            identity,
            out,
            common,
        } => {
            commands::init(config.as_deref(), &preset, &common.overrides(None), identity, &out)?;
        }
        Command::Inspect {
            checkpoint,
            config,
            common,
        } => {
            let summary =
                commands::inspect(checkpoint.as_deref(), config.as_deref(), &common.overrides(None))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
