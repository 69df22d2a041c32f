//! Sequential-experiment runner: per-task training loops under a fixed
//! gradient budget, periodic evaluation of every task in the sequence,
//! checkpointing, and CSV/JSON artifact export.
//!
//! Artifacts per run directory:
//!   config.json            resolved experiment configuration
//!   curves.csv             global_step, task_index, accuracy
//!   losses.csv             step, q1, q2, cql1, cql2, policy, si, bc
//!   metrics.json           forgetting / AUC / transfer table
//!   checkpoint_task{N}.bin parameters + optimizer + SI at task ends

pub mod metrics;

use crate::checkpoint;
use crate::datastore::{read_dataset, sample_batch, validate_against, Dataset};
use crate::error::{CsrlError, Result};
use crate::learner::{train_step, Agent, Hyperparams, LossRecord};
use crate::nets::{Nets, ObsMode, TrunkConfig, VECTOR_OBS_DIM};
use crate::rng::{derive, Stream};
use crate::si::SIState;
use crate::tabletop::{self, Action7, TaskSpec};
use metrics::{compute, curves_to_csv, CurvePoint, MetricsTable};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One slot in the task sequence: the task plus its dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    #[serde(flatten)]
    pub spec: TaskSpec,
    pub data: PathBuf,
}

/// Learner hyperparameters as they appear in the config file. Warm-start
/// and budget lengths live at the top level of [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSettings {
    pub gamma: f32,
    pub alpha: f32,
    pub alpha_cql: f32,
    pub si_c: f32,
    pub tau: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub n_cql_samples: usize,
}

impl Default for HyperSettings {
    fn default() -> Self {
        let hp = Hyperparams::default();
        HyperSettings {
            gamma: hp.gamma,
            alpha: hp.alpha,
            alpha_cql: hp.alpha_cql,
            si_c: hp.si_c,
            tau: hp.tau,
            lr: hp.lr,
            batch_size: hp.batch_size,
            n_cql_samples: hp.n_cql_samples,
        }
    }
}

fn default_steps_per_task() -> u64 {
    100_000
}
fn default_eval_every() -> u64 {
    1000
}
fn default_eval_episodes() -> usize {
    10
}
fn default_bc_steps() -> u64 {
    5000
}
fn default_si_enabled() -> bool {
    true
}

/// A full experiment: the ordered task sequence and everything needed to
/// reproduce the run. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskEntry>,
    #[serde(default = "default_steps_per_task")]
    pub steps_per_task: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_bc_steps")]
    pub bc_steps: u64,
    #[serde(default = "default_si_enabled")]
    pub si_enabled: bool,
    #[serde(default)]
    pub hyperparams: HyperSettings,
    #[serde(default)]
    pub trunk: TrunkConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Damping used when folding the path integral into importances.
pub const SI_XI: f32 = 1e-3;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(CsrlError::Config("task list is empty".into()));
        }
        let mode = self.tasks[0].spec.obs_mode;
        if self.tasks.iter().any(|t| t.spec.obs_mode != mode) {
            return Err(CsrlError::Config(
                "all tasks in a sequence must share one observation mode".into(),
            ));
        }
        for t in &self.tasks {
            t.spec.validate()?;
        }
        if self.eval_every == 0 || self.steps_per_task % self.eval_every != 0 {
            return Err(CsrlError::Config(format!(
                "steps_per_task ({}) must be a positive multiple of eval_every ({})",
                self.steps_per_task, self.eval_every
            )));
        }
        if self.eval_episodes == 0 {
            return Err(CsrlError::Config("eval_episodes must be positive".into()));
        }
        self.hyperparams_resolved().validate()
    }

    pub fn obs_mode(&self) -> ObsMode {
        self.tasks[0].spec.obs_mode
    }

    /// Full learner hyperparameters; disabling consolidation forces c = 0.
    pub fn hyperparams_resolved(&self) -> Hyperparams {
        let h = &self.hyperparams;
        Hyperparams {
            gamma: h.gamma,
            alpha: h.alpha,
            alpha_cql: h.alpha_cql,
            si_c: if self.si_enabled { h.si_c } else { 0.0 },
            tau: h.tau,
            lr: h.lr,
            batch_size: h.batch_size,
            n_cql_samples: h.n_cql_samples,
            bc_steps: self.bc_steps,
            steps_per_task: self.steps_per_task,
        }
    }

    /// Desk-scale settings: a narrow vector trunk and a 30k budget that a
    /// laptop CPU finishes in minutes. Used by the acceptance suite.
    pub fn desk_preset(tasks: Vec<TaskEntry>, seed: u64, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            tasks,
            steps_per_task: 30_000,
            eval_every: 1000,
            eval_episodes: 10,
            bc_steps: 2000,
            si_enabled: true,
            hyperparams: HyperSettings {
                batch_size: 32,
                ..Default::default()
            },
            trunk: TrunkConfig {
                vector_widths: vec![64, 64],
                ..Default::default()
            },
            seed,
            out_dir,
        }
    }

    /// Full-scale settings: 100k steps per task, 5k warm start, image
    /// observations with the declared conv trunk.
    pub fn paper_preset(tasks: Vec<TaskEntry>, seed: u64, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            tasks,
            steps_per_task: 100_000,
            eval_every: 1000,
            eval_episodes: 10,
            bc_steps: 5000,
            si_enabled: true,
            hyperparams: HyperSettings::default(),
            trunk: TrunkConfig::default(),
            seed,
            out_dir,
        }
    }
}

// ── evaluation ──────────────────────────────────────────────────────

/// Success rate of the deterministic policy (action = tanh(mean) on the
/// task's head) over `episodes` fresh object placements. The eval RNG is
/// derived from (seed, global_step, task), fully decoupled from training.
pub fn evaluate(
    agent: &Agent,
    spec: &TaskSpec,
    task_head: usize,
    episodes: usize,
    seed: u64,
    global_step: u64,
) -> Result<f64> {
    let mut rng = derive(seed, Stream::Eval, global_step * 64 + task_head as u64);
    let (x0, x1, y0, y1) = spec.object_space_rect();
    let mut successes = 0usize;
    for _ in 0..episodes {
        let config = tabletop::ObjectConfig {
            x: rng.gen_range(x0..x1),
            y: rng.gen_range(y0..y1),
        };
        let (mut state, mut obs) = tabletop::reset(spec, config)?;
        let mut succeeded = false;
        loop {
            let action = agent.nets.eval_action(&agent.params, &obs, task_head)?;
            let (next, next_obs, reward, done) =
                tabletop::step(spec, &state, &Action7::from_array(&action))?;
            succeeded |= reward > 0.0;
            state = next;
            obs = next_obs;
            if done {
                break;
            }
        }
        if succeeded {
            successes += 1;
        }
    }
    Ok(successes as f64 / episodes as f64)
}

// ── the sequential run ──────────────────────────────────────────────

pub struct RunOutput {
    pub metrics: MetricsTable,
    pub run_dir: PathBuf,
}

fn losses_header() -> &'static str {
    "step,q1,q2,cql1,cql2,policy,si,bc\n"
}

fn loss_row(global_step: u64, r: &LossRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}\n",
        global_step, r.q1, r.q2, r.cql1, r.cql2, r.policy, r.si, r.bc
    )
}

/// Trains the task sequence under the configured budget, evaluating every
/// task at every checkpoint, consolidating at task boundaries when SI is
/// enabled, and writing all artifacts into the run directory.
pub fn run_sequence(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let run_dir = config.out_dir.clone();
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_vec_pretty(config)?,
    )?;

    // datasets, validated against their specs
    let mut datasets: Vec<Dataset> = Vec::with_capacity(config.tasks.len());
    for entry in &config.tasks {
        let ds = read_dataset(&entry.data)?;
        validate_against(&ds, &entry.spec)?;
        datasets.push(ds);
    }

    let n_tasks = config.tasks.len();
    let hp = config.hyperparams_resolved();
    let nets = Nets::new(config.obs_mode(), config.trunk.clone(), n_tasks);
    if config.obs_mode() == ObsMode::Vector {
        debug_assert_eq!(datasets[0].header.obs_len(), VECTOR_OBS_DIM);
    }
    let mut agent = Agent::new(nets, config.seed, hp.lr);
    let actor_names = agent.nets.actor_names(&agent.params);
    let mut si = SIState::new(&agent.params, &actor_names, SI_XI);

    let mut curves: Vec<CurvePoint> = Vec::new();
    let mut losses_csv = String::from(losses_header());
    let mut train_rng = derive(config.seed, Stream::Train, 0);

    let eval_all = |agent: &Agent, global_step: u64, curves: &mut Vec<CurvePoint>| -> Result<()> {
        for (i, entry) in config.tasks.iter().enumerate() {
            let accuracy = evaluate(
                agent,
                &entry.spec,
                i,
                config.eval_episodes,
                config.seed,
                global_step,
            )?;
            curves.push(CurvePoint {
                global_step,
                task_index: i + 1,
                accuracy,
            });
        }
        Ok(())
    };

    eval_all(&agent, 0, &mut curves)?;

    // retained for the NaN-abort path
    let mut last_good = (agent.clone(), si.clone());

    for mu in 1..=n_tasks {
        si.begin_task(mu);
        let entry = &config.tasks[mu - 1];
        let dataset = &datasets[mu - 1];
        for step_in_task in 0..config.steps_per_task {
            let global_step = (mu as u64 - 1) * config.steps_per_task + step_in_task + 1;
            let batch = sample_batch(dataset, &entry.spec, hp.batch_size, &mut train_rng)?;
            // data isolation: only the current task's transitions reach
            // the learner
            assert_eq!(batch.task, entry.spec.task, "batch from the wrong dataset");

            match train_step(
                &mut agent,
                &hp,
                &batch,
                &mut si,
                mu - 1,
                step_in_task,
                &mut train_rng,
            ) {
                Ok(rec) => losses_csv.push_str(&loss_row(global_step, &rec)),
                Err(err) => {
                    let (good_agent, good_si) = &last_good;
                    checkpoint::save(&run_dir.join("checkpoint_abort.bin"), good_agent, good_si)?;
                    flush_artifacts(&run_dir, &losses_csv, &curves)?;
                    return Err(err);
                }
            }

            if (step_in_task + 1) % config.eval_every == 0 {
                eval_all(&agent, global_step, &mut curves)?;
                last_good = (agent.clone(), si.clone());
            }
        }
        if config.si_enabled {
            si.consolidate(&agent.params.clone());
        }
        checkpoint::save(&run_dir.join(format!("checkpoint_task{mu}.bin")), &agent, &si)?;
    }

    flush_artifacts(&run_dir, &losses_csv, &curves)?;
    let task_names: Vec<String> = config
        .tasks
        .iter()
        .map(|t| t.spec.task.to_string())
        .collect();
    let table = compute(&task_names, curves, config.steps_per_task, config.eval_every)?;
    std::fs::write(
        run_dir.join("metrics.json"),
        serde_json::to_vec_pretty(&table)?,
    )?;
    Ok(RunOutput {
        metrics: table,
        run_dir,
    })
}

fn flush_artifacts(run_dir: &Path, losses_csv: &str, curves: &[CurvePoint]) -> Result<()> {
    let mut f = std::fs::File::create(run_dir.join("losses.csv"))?;
    f.write_all(losses_csv.as_bytes())?;
    std::fs::write(run_dir.join("curves.csv"), curves_to_csv(curves))?;
    Ok(())
}

// ── metrics-from-artifacts (the `metrics` subcommand path) ──────────

/// Recomputes the metrics table from a run directory's exported curves
/// and config. When baseline run directories are supplied, forward
/// transfer is filled in for every task whose baseline matches: a
/// single-task run of the same task spec under the same hyperparameters
/// and budget.
pub fn metrics_from_run(run_dir: &Path, baseline_dirs: &[PathBuf]) -> Result<MetricsTable> {
    let config: ExperimentConfig =
        serde_json::from_slice(&std::fs::read(run_dir.join("config.json"))?)?;
    let curves = metrics::curves_from_csv(&std::fs::read_to_string(run_dir.join("curves.csv"))?)?;
    let task_names: Vec<String> = config
        .tasks
        .iter()
        .map(|t| t.spec.task.to_string())
        .collect();
    let mut table = compute(&task_names, curves, config.steps_per_task, config.eval_every)?;

    for dir in baseline_dirs {
        let base_cfg: ExperimentConfig =
            serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
        if base_cfg.tasks.len() != 1 {
            return Err(CsrlError::Config(format!(
                "baseline {} is not a single-task run",
                dir.display()
            )));
        }
        let comparable = base_cfg.hyperparams == config.hyperparams
            && base_cfg.steps_per_task == config.steps_per_task
            && base_cfg.eval_every == config.eval_every
            && base_cfg.bc_steps == config.bc_steps;
        if !comparable {
            return Err(CsrlError::Config(format!(
                "baseline {} hyperparameters do not match the run",
                dir.display()
            )));
        }
        let base_curves =
            metrics::curves_from_csv(&std::fs::read_to_string(dir.join("curves.csv"))?)?;
        let base_curve = metrics::curve_of(&base_curves, 1);
        let auc_b = metrics::auc(&base_curve, 0, base_cfg.steps_per_task)?;

        for (i, entry) in config.tasks.iter().enumerate() {
            if entry.spec == base_cfg.tasks[0].spec {
                table.auc_baseline[i] = Some(auc_b);
                table.forward_transfer[i] = metrics::forward_transfer(table.auc[i], auc_b);
            }
        }
    }
    Ok(table)
}
