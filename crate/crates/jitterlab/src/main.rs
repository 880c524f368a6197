//! Command-line entry point for the simulation harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use jitterlab::harness::config::{ConfigDraft, ExperimentKind};
use jitterlab::harness::experiments::run_experiment;

/// Simulation harness for jitter-robust signal-coefficient estimators.
#[derive(Parser, Debug)]
#[command(name = "jitterlab", version, about)]
struct Cli {
    /// Experiment to run: validate-likelihood, converge, init-sensitivity,
    /// compare, or improve.
    experiment: String,

    /// Path to the `key = value` experiment configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Override the master seed from the configuration file.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the trial count from the configuration file.
    #[arg(long)]
    trials: Option<usize>,

    /// Override the output CSV path from the configuration file.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Restore publication-scale workloads (1000 trials, 100 chains,
    /// 100000 histogram draws).
    #[arg(long)]
    paper_scale: bool,

    /// Also write per-sweep-point aggregate tables for plotting.
    #[arg(long)]
    emit_plotdata: bool,
}

fn run(cli: &Cli) -> jitterlab::Result<()> {
    let kind = ExperimentKind::parse(&cli.experiment)?;
    let text = std::fs::read_to_string(&cli.config)?;
    let mut draft = ConfigDraft::parse(&text)?;
    if cli.paper_scale {
        draft.apply_paper_scale();
    }
    if let Some(seed) = cli.seed {
        draft.seed = Some(seed);
    }
    if let Some(trials) = cli.trials {
        draft.trials = Some(trials);
    }
    if let Some(out) = &cli.out {
        draft.out = Some(out.clone());
    }
    let mut cfg = draft.build(kind)?;
    cfg.emit_plotdata = cli.emit_plotdata;
    run_experiment(&cfg)?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
