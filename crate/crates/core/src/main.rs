use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rlvr_lab::cli::{self, ExperimentSpec, Overrides};
use rlvr_lab::LabError;

#[derive(Parser)]
#[command(name = "rlvr", about = "Single-rollout RLVR laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (run, seed) pair.
    Run(Common),
    /// Compare algorithms under an equal rollout budget. A spec with a
    /// single run expands to all five algorithms.
    Compare(Common),
    /// Grid over the [sweep] axes.
    Sweep(Common),
    /// Oracle and gradient-check suites.
    Check {
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

fn load(c: &Common) -> Result<ExperimentSpec, LabError> {
    let mut spec = match &c.config {
        Some(p) => cli::parse_config(p)?,
        None => cli::parse_config_str("")?,
    };
    spec.apply(&Overrides {
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        steps: c.steps,
    })?;
    Ok(spec)
}

fn execute(cmd: Command) -> Result<i32, LabError> {
    match cmd {
        Command::Run(c) => {
            let spec = load(&c)?;
            let summary = cli::run_experiment(&spec)?;
            for r in &summary.runs {
                println!(
                    "{} seed={} final_val_acc={:.4} final_entropy={:.4} steps_to_target={:?}",
                    r.name, r.seed, r.final_val_acc, r.final_entropy, r.steps_to_target
                );
            }
            Ok(0)
        }
        Command::Compare(c) => {
            let mut spec = load(&c)?;
            spec.expand_comparison()?;
            let summary = cli::run_experiment(&spec)?;
            println!("rollouts/step: {}", summary.rollouts_per_step);
            for e in &summary.efficiency {
                println!(
                    "{:<14} steps_to_target={:?} ({}/{} seeds) mean_final_val_acc={:.4}",
                    e.name, e.mean_steps_to_target, e.seeds_reaching_target, e.seeds, e.mean_final_val_acc
                );
            }
            if let Some(r) = summary.mssr_to_grpo_step_ratio {
                println!("mssr/grpo steps-to-target ratio: {r:.3}");
            }
            Ok(0)
        }
        Command::Sweep(c) => {
            let spec = load(&c)?;
            for r in cli::sweep(&spec)? {
                println!("{} seed={} final_val_acc={:.4}", r.cell, r.seed, r.final_val_acc);
            }
            Ok(0)
        }
        Command::Check { samples } => {
            let report = cli::run_checks(&[1, 2, 3, 4, 5], samples)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(if report.pass { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
