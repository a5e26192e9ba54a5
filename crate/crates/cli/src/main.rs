use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elc::autograd::OpKind;
use elc::gradcheck::Scope;
use elc::impact::ImpactFamily;
use elc::synth::TaskKind;

mod commands;

/// Recurrent cells with explicit long-range conditioning: impact
/// experiments, gradient checks, synthetic data and scene-labeling training.
#[derive(Parser, Debug)]
#[command(name = "elc", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed applied to every randomized section (impact, synth, train).
    #[arg(long, global = true, env = "ELC_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fluctuation curve of a perturbed first input, written as CSV plus a
    /// `.meta` sidecar.
    Impact(ImpactArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset as PPM/PGM pairs with a manifest.
    Synth(SynthArgs),
    /// Train a scene-labeling model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct ImpactArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// rnn, lstm, gru, rnn-elc, lstm-elc or gru-elc-1d.
    #[arg(long)]
    family: Option<ImpactFamily>,
    /// Enable conditioning, e.g. `s=20,k=1`.
    #[arg(long)]
    elc: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Add one column per trial.
    #[arg(long)]
    keep_trials: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// cells, elc, model or all.
    #[arg(long, default_value = "cells")]
    scope: Scope,
    /// Entries checked per tensor (default: all).
    #[arg(long)]
    max_entries: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: Option<OpKind>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kind: Option<TaskKind>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    distance: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Manifest of training pairs (default: synthetic data from the config).
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Manifest of held-out pairs (default: synthetic data from the config).
    #[arg(long)]
    test_manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output directory for checkpoints, metrics.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    median_balancing: bool,
    /// Also save a checkpoint after every epoch.
    #[arg(long)]
    epoch_checkpoints: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pairs to evaluate (default: the config's held-out synthetic split).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
