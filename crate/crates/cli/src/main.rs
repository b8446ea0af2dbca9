//! `macaw` — offline meta-RL experiments on the point-mass task suites.
//!
//! Exit codes: 0 on success, 1 on a validation problem (bad flags, bad
//! config, artifacts that don't match the run), 2 on a runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use macaw_cli::commands;
use macaw_cli::config::ExperimentConfig;
use macaw_cli::ValidationError;

// Training builds and frees large autodiff tapes every iteration; a pooling
// allocator keeps that out of the kernel's page allocator.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "macaw", version, about = "Offline meta-RL experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to a JSON experiment config (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set seed=3 --set method=\"meta-bc\".
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-task offline datasets and the run manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the configured method, writing metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt and evaluate a trained checkpoint on the held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run the data-quality ablation grid (tiers x methods).
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the numerical verification battery.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Corrupt one analytic gradient to prove the checks can fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(common.config.as_deref(), &common.set)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, force } => commands::cmd_gen_data(&load(&common)?, force),
        Command::Train { common, resume } => commands::cmd_train(&load(&common)?, resume),
        Command::Eval { common } => commands::cmd_eval(&load(&common)?).map(|_| ()),
        Command::Ablate { common } => commands::cmd_ablate(&load(&common)?).map(|_| ()),
        Command::Verify { common, inject_fault } => {
            commands::cmd_verify(&load(&common)?, inject_fault).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are validation errors; --help/--version are not.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
