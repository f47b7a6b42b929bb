use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use etank_lab::config::ExperimentConfig;
use etank_lab::pipeline::{self, PipelineError};

/// Energy-tank scheduling experiments in simulation.
#[derive(Parser)]
#[command(name = "etank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate skills and record their ground-truth tank power.
    Collect(Args),
    /// Train the power estimator on the collected dataset.
    Train(Args),
    /// Predict power and the energy schedule of the configured skill.
    Estimate(Args),
    /// Build the task-energy heat map over start positions.
    Heatmap(Args),
    /// Held-out accuracy and zero-shot transfer against the expert baseline.
    Eval(Args),
    /// Contact-loss experiment in the three tank modes.
    Safety(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (Command::Collect(a)
    | Command::Train(a)
    | Command::Estimate(a)
    | Command::Heatmap(a)
    | Command::Eval(a)
    | Command::Safety(a)) = &cli.command;
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = &a.out;
    match &cli.command {
        Command::Collect(_) => {
            let m = pipeline::cmd_collect(&cfg, out)?;
            println!("collected {} skills", m.ok_entries().count());
        }
        Command::Train(_) => {
            let est = pipeline::cmd_train(&cfg, out)?;
            if let Some(e) = est.history.epochs.last() {
                println!("epoch {}: validation MAPE {:.2}%", e.epoch, e.val_mape_pct);
            }
        }
        Command::Estimate(_) => {
            let r = pipeline::cmd_estimate(&cfg, out)?;
            println!("scheduled energy {:.4} J (expert {:.4} J)", r.scheduled_energy_j, r.expert_energy_j);
        }
        Command::Heatmap(_) => {
            let r = pipeline::cmd_heatmap(&cfg, out)?;
            println!("{} nodes, {:.4}..{:.4} J", r.valid_nodes, r.min_j, r.max_j);
        }
        Command::Eval(_) => {
            let r = pipeline::cmd_eval(&cfg, out)?;
            let line = |s: &pipeline::SurfaceEval| {
                println!(
                    "{}: MAPE {:.2}%, MAPE_sum {:.2}% (expert {:.2}%), r {:.3}",
                    s.surface, s.model.mape.mean, s.model.mape_sum.mean, s.expert.mape_sum.mean, s.model.pearson_r.mean
                )
            };
            line(&r.in_domain);
            r.transfer.iter().for_each(line);
        }
        Command::Safety(_) => {
            let s = pipeline::cmd_safety(&cfg, out)?;
            for r in &s.reports {
                println!(
                    "{:?}: falling {:.2} cm, peak force {:.2} N, floor hit {}",
                    r.mode, r.falling_distance_cm, r.peak_contact_force_n, r.hit_floor
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
