//! `csrl` — dataset collection, sequential training, baselines, and
//! metric reports for the continual offline-RL engine.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use csrl_core::datastore::{generate, read_dataset};
use csrl_core::harness::{
    metrics::reward_map, metrics_from_run, run_sequence, ExperimentConfig,
};
use csrl_core::nets::ObsMode;
use csrl_core::tabletop::{TaskKind, TaskSpec};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "csrl", version, about = "Continual offline RL on tabletop manipulation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset with the scripted policy.
    Collect {
        /// press_button | pick_shed | open_drawer
        #[arg(long)]
        task: TaskKind,
        /// Object-space area in cm^2.
        #[arg(long)]
        area: f32,
        /// Object configurations per cm^2.
        #[arg(long)]
        density: f32,
        /// Scripted-policy noise level.
        #[arg(long, default_value_t = 0.1)]
        sigma: f32,
        #[arg(long)]
        seed: u64,
        /// Output dataset file (a .meta.json sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        /// vector | image
        #[arg(long, value_enum, default_value = "vector")]
        obs_mode: ObsModeArg,
    },
    /// Train a task sequence from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the single-task reference run for one task of a config.
    Baseline {
        /// Task to isolate; must appear in the config's task list.
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <config out_dir>_baseline_<task>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from a run directory; optionally fill forward
    /// transfer from matching single-task baselines.
    Metrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        baseline: Vec<PathBuf>,
    },
    /// Export (object x, object y, episode return) rows from a dataset.
    RewardMap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ObsModeArg {
    Vector,
    Image,
}

impl From<ObsModeArg> for ObsMode {
    fn from(v: ObsModeArg) -> Self {
        match v {
            ObsModeArg::Vector => ObsMode::Vector,
            ObsModeArg::Image => ObsMode::Image,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Collect {
            task,
            area,
            density,
            sigma,
            seed,
            out,
            obs_mode,
        } => {
            let spec = TaskSpec::new(task, area, density, obs_mode.into());
            let summary = generate(&spec, sigma, seed, &out)
                .with_context(|| format!("collecting {} to {}", task, out.display()))?;
            println!(
                "wrote {} episodes ({} transitions) to {}",
                summary.episode_count,
                summary.transition_count,
                out.display()
            );
            println!(
                "mean return {:.3}, scripted accuracy {:.3}",
                summary.mean_return, summary.measured_accuracy
            );
            if summary.low_accuracy_warning {
                eprintln!(
                    "warning: measured accuracy {:.3} is below the 0.8 floor",
                    summary.measured_accuracy
                );
            }
        }
        Command::Train { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let out = run_sequence(&cfg)?;
            println!("run complete: {}", out.run_dir.display());
            print_metrics(&out.metrics);
        }
        Command::Baseline { task, config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::from_json(&text)?;
            let Some(entry) = cfg.tasks.iter().find(|t| t.spec.task == task).cloned() else {
                bail!("task {task} is not part of the config's sequence");
            };
            cfg.tasks = vec![entry];
            cfg.out_dir = out.unwrap_or_else(|| {
                let mut dir = cfg.out_dir.clone().into_os_string();
                dir.push(format!("_baseline_{task}"));
                PathBuf::from(dir)
            });
            let run = run_sequence(&cfg)?;
            println!("baseline complete: {}", run.run_dir.display());
            print_metrics(&run.metrics);
        }
        Command::Metrics { run, baseline } => {
            let table = metrics_from_run(&run, &baseline)?;
            std::fs::write(run.join("metrics.json"), serde_json::to_vec_pretty(&table)?)?;
            print_metrics(&table);
        }
        Command::RewardMap { data, out } => {
            let dataset = read_dataset(&data)?;
            let rows = reward_map(&dataset);
            let mut csv = String::from("object_x,object_y,episode_return\n");
            for (x, y, r) in &rows {
                csv.push_str(&format!("{x},{y},{r}\n"));
            }
            std::fs::write(&out, csv)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn print_metrics(table: &csrl_core::harness::metrics::MetricsTable) {
    println!(
        "delta {} steps/task, total {} steps, eval every {}",
        table.delta, table.total_steps, table.eval_every
    );
    for (i, name) in table.tasks.iter().enumerate() {
        let ttfs = table.time_to_first_success[i]
            .map(|s| s.to_string())
            .unwrap_or_else(|| "never".into());
        let ft = table.forward_transfer[i]
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "task {} ({name}): forgetting {:.4}, auc {:.4}, first success {} steps, forward transfer {}",
            i + 1,
            table.forgetting[i],
            table.auc[i],
            ttfs,
            ft
        );
    }
}
