mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{BASE_CHECKPOINT, DATA_DIR};
use config::ExperimentConfig;

/// Synthetic-data experiments for context-aware forecasting.
///
/// Log verbosity is read from CONTEXTFORMER_LOG (error, info or debug).
#[derive(Parser)]
#[command(name = "contextformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply_overrides(self.seed);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an ARMA dataset directory.
    SynthGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory [default: <output_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit AR models with 0..=Q context features and write the error curve.
    ArSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV path [default: <output_dir>/ar_sweep.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the context-agnostic model; writes <out>/base and base_loss.csv.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory [default: <output_dir>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach context modules to a base checkpoint and fine-tune them;
    /// writes <out>/context and context_loss.csv.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Base checkpoint [default: <out>/base].
        #[arg(long)]
        base: Option<PathBuf>,
        /// Run directory [default: <output_dir>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints and writes an EvalReport JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path [default: <checkpoint>/../eval_<kind>_<split>.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect eval reports of several runs into one CSV table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn or_default(path: Option<PathBuf>, base: &Path, name: &str) -> PathBuf {
    path.unwrap_or_else(|| base.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { cfg, out } => {
            let cfg = cfg.load()?;
            commands::synth_gen(&cfg, &or_default(out, &cfg.output_dir, DATA_DIR))
        }
        Command::ArSweep { cfg, out } => {
            let cfg = cfg.load()?;
            commands::ar_sweep(&cfg, &or_default(out, &cfg.output_dir, "ar_sweep.csv"))
        }
        Command::TrainBase { cfg, data, out } => {
            let cfg = cfg.load()?;
            let run = out.unwrap_or_else(|| cfg.output_dir.clone());
            commands::train_base_cmd(&cfg, &or_default(data, &run, DATA_DIR), &run)
        }
        Command::Finetune {
            cfg,
            data,
            base,
            out,
        } => {
            let cfg = cfg.load()?;
            let run = out.unwrap_or_else(|| cfg.output_dir.clone());
            commands::finetune_cmd(
                &cfg,
                &or_default(data, &run, DATA_DIR),
                &or_default(base, &run, BASE_CHECKPOINT),
                &run,
            )
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = commands::eval_cmd(&checkpoint, &data, &split, out.as_deref())?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Report { runs, out } => commands::report_cmd(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("CONTEXTFORMER_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
