//! Command-line entry point: one subcommand per experiment family plus
//! `verify`, which runs the acceptance suite and exits nonzero on failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tabrl_core::harness::{self, verify, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(
    name = "tabrl",
    about = "Tabular reinforcement-learning laboratory: seeded experiments and acceptance checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for results.csv, manifest.txt and trace files.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Comma-separated seed list overriding the config's `seeds`.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact planning study (value iteration vs policy iteration).
    Plan(RunArgs),
    /// Generative-model learners: model-based planning, Q-learning, TD.
    GenModel(RunArgs),
    /// Online episodic learning with UCB value iteration.
    Online(RunArgs),
    /// Offline VI-LCB with the Bernstein penalty.
    Offline(RunArgs),
    /// Distributionally robust value iteration under TV uncertainty.
    Robust(RunArgs),
    /// Exact-gradient policy optimization.
    PolicyOpt(RunArgs),
    /// Tabular preference optimization (online VPO).
    Rlhf(RunArgs),
    /// Run the acceptance suite and print PASS/FAIL per criterion.
    Verify {
        /// Only run these criterion ids (comma separated, 1-11).
        #[arg(long)]
        only: Option<String>,
    },
}

fn run(kind: ExperimentKind, args: &RunArgs) -> tabrl_core::Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = ExperimentConfig::from_text(&text)?;
    if cfg.kind != kind {
        return Err(tabrl_core::Error::Config(format!(
            "config is for kind `{}` but the `{}` subcommand was invoked",
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(seeds) = &args.seeds {
        cfg.override_seeds(seeds);
    }
    let output = harness::run_experiment(&cfg, &args.out)?;
    println!(
        "wrote {} records ({} files) to {}",
        output.records.len(),
        output.files.len(),
        args.out.display()
    );
    for record in &output.records {
        let sweep = record
            .sweep
            .as_ref()
            .map(|(k, v)| format!(" {k}={v}"))
            .unwrap_or_default();
        let metrics: Vec<String> = record
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect();
        println!(
            "  seed {:>4}{}  {}  [{:.2}s]",
            record.seed,
            sweep,
            metrics.join("  "),
            record.wall_clock.as_secs_f64()
        );
    }
    Ok(())
}

fn run_verify(only: Option<String>) -> ExitCode {
    let selected: Option<Vec<usize>> = only.map(|list| {
        list.split(',')
            .filter_map(|tok| tok.trim().parse::<usize>().ok())
            .collect()
    });
    let results: Vec<_> = verify::run_all()
        .into_iter()
        .filter(|r| selected.as_ref().is_none_or(|ids| ids.contains(&r.id)))
        .collect();
    for result in &results {
        println!("{}", result.line());
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed == 0 {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} criteria failed", results.len());
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Plan(args) => run(ExperimentKind::Plan, args),
        Command::GenModel(args) => run(ExperimentKind::GenModel, args),
        Command::Online(args) => run(ExperimentKind::Online, args),
        Command::Offline(args) => run(ExperimentKind::Offline, args),
        Command::Robust(args) => run(ExperimentKind::Robust, args),
        Command::PolicyOpt(args) => run(ExperimentKind::PolicyOpt, args),
        Command::Rlhf(args) => run(ExperimentKind::Rlhf, args),
        Command::Verify { only } => return run_verify(only.clone()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
