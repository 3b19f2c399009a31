use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfmamba_cli::{cmd_bench, cmd_eval, cmd_inspect, cmd_synth, cmd_train, CliError, Overrides, RunConfig};

/// Train, evaluate and benchmark TF-Mamba emotion classifiers on
/// precomputed feature files.
///
/// Exit codes: 0 ok, 2 configuration, 3 I/O, 4 label or shape mismatch,
/// 5 non-finite value during training.
#[derive(Parser)]
#[command(name = "tfmamba", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override such as `train.lr=5e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for initialization, batch order, folds and synthetic data.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated training on `data.manifest`.
    Train,
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Restrict to the held-out part of this cross-validation fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Scan and forward-pass latency tables.
    Bench,
    /// Before/after traces of the first block on one utterance.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Generate a synthetic corpus with its manifest.
    Synth {
        /// Standalone synthetic spec JSON; defaults to the `synth` section.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let cfg = RunConfig::resolve(&Overrides {
        config: g.config,
        set: g.set,
        out: g.out,
        seed: g.seed,
    })?;
    match cli.command {
        Command::Train => cmd_train(&cfg).map(drop),
        Command::Eval {
            checkpoint,
            manifest,
            fold,
        } => cmd_eval(&cfg, &checkpoint, manifest.as_deref(), fold).map(drop),
        Command::Bench => cmd_bench(&cfg).map(drop),
        Command::Inspect { checkpoint, features } => cmd_inspect(&cfg, &checkpoint, &features).map(drop),
        Command::Synth { spec } => cmd_synth(&cfg, spec.as_deref()).map(drop),
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
