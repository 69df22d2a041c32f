//! One SAC-CQL gradient step.
//!
//! Per step, in order: (1) bootstrap targets from the target critics with
//! a fresh policy sample (no gradient), (2) critic update on the Bellman
//! loss plus the conservative penalty, (3) actor update — behaviour
//! cloning during the warm start, otherwise the entropy-regularised
//! policy loss plus the consolidation penalty from task two on, (4) the
//! path-integral hook fires with the applied actor gradient and realized
//! parameter change, (5) Polyak target sync.
//!
//! Randomness is pre-drawn per step into [`StepNoise`] in a fixed order,
//! so an independent reimplementation fed the same noise must reproduce
//! every loss value.

use crate::adam::{adam_step, AdamState};
use crate::array::{Grads, ParamStore, RealArray};
use crate::error::{CsrlError, Result};
use crate::nets::{
    sample_action_with_eps, target_sync, Net, Nets, ParamMode, ACTION_BOUND, ACTION_DIM, TANH_EPS,
};
use crate::si::SIState;
use crate::tabletop::TaskKind;
use crate::tape::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_2PI: f32 = 1.8378770664093453;

/// Training hyperparameters. `bc_steps` and `steps_per_task` ride along
/// here so the learner is self-contained; the experiment config owns
/// their user-facing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Discount, in (0, 1).
    pub gamma: f32,
    /// Entropy temperature, > 0.
    pub alpha: f32,
    /// Conservative-penalty weight, >= 0.
    pub alpha_cql: f32,
    /// Consolidation strength c, >= 0.
    pub si_c: f32,
    /// Polyak rate for target sync.
    pub tau: f32,
    pub lr: f32,
    pub batch_size: usize,
    /// Uniform and policy candidates per row in the conservative penalty.
    pub n_cql_samples: usize,
    /// Actor warm-start length (behaviour cloning), in steps.
    pub bc_steps: u64,
    /// Gradient budget per task.
    pub steps_per_task: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            alpha: 0.1,
            alpha_cql: 1.0,
            si_c: 1.0,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 64,
            n_cql_samples: 4,
            bc_steps: 5000,
            steps_per_task: 100_000,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma < 1.0
            && self.alpha > 0.0
            && self.alpha_cql >= 0.0
            && self.si_c >= 0.0
            && (0.0..=1.0).contains(&self.tau)
            && self.lr > 0.0
            && self.batch_size > 0
            && self.n_cql_samples >= 1
            && self.steps_per_task >= self.bc_steps;
        if ok {
            Ok(())
        } else {
            Err(CsrlError::Config(format!("hyperparameters out of range: {self:?}")))
        }
    }
}

/// A minibatch of transitions from one task's dataset. Observations are
/// raw (unnormalized); the gripper action channel is already mapped to
/// [-1, 1].
#[derive(Debug, Clone)]
pub struct Batch {
    pub task: TaskKind,
    pub obs: RealArray,
    pub actions: RealArray,
    pub rewards: Vec<f32>,
    pub next_obs: RealArray,
    pub dones: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// All random draws one train step consumes, in draw order:
/// target-sample noise, uniform candidates, policy-candidate noise,
/// reparameterization noise.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub next_eps: RealArray,
    pub cql_uniform: RealArray,
    pub cql_policy_eps: RealArray,
    pub pi_eps: RealArray,
}

pub fn draw_step_noise(rng: &mut ChaCha8Rng, batch: usize, n_cql: usize) -> StepNoise {
    fn normals(rng: &mut ChaCha8Rng, count: usize) -> Vec<f32> {
        (0..count)
            .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect()
    }
    let next_eps = RealArray::from_vec(&[batch, ACTION_DIM], normals(rng, batch * ACTION_DIM));
    let uniform: Vec<f32> = (0..batch * n_cql * ACTION_DIM)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let cql_uniform = RealArray::from_vec(&[batch * n_cql, ACTION_DIM], uniform);
    let cql_policy_eps = RealArray::from_vec(
        &[batch * n_cql, ACTION_DIM],
        normals(rng, batch * n_cql * ACTION_DIM),
    );
    let pi_eps = RealArray::from_vec(&[batch, ACTION_DIM], normals(rng, batch * ACTION_DIM));
    StepNoise {
        next_eps,
        cql_uniform,
        cql_policy_eps,
        pi_eps,
    }
}

/// Networks plus their optimizers.
#[derive(Debug, Clone)]
pub struct Agent {
    pub nets: Nets,
    pub params: ParamStore,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl Agent {
    pub fn new(nets: Nets, seed: u64, lr: f32) -> Self {
        let params = nets.init_params(seed);
        Agent {
            nets,
            params,
            actor_opt: AdamState::new(lr),
            critic_opt: AdamState::new(lr),
        }
    }
}

/// Per-step loss values exported to `losses.csv`. Conservative penalties
/// are recorded unscaled; `si` is the applied c * L term; entries not
/// computed in a given phase are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossRecord {
    pub step: u64,
    pub q1: f64,
    pub q2: f64,
    pub cql1: f64,
    pub cql2: f64,
    pub policy: f64,
    pub si: f64,
    pub bc: f64,
}

// ── targets ─────────────────────────────────────────────────────────

/// Bellman target per row:
///   y = r + (1 - done) * gamma * (min(Q'_1, Q'_2)(s', a') - alpha * log pi(a'|s'))
/// with a' drawn from the current policy at s'. Computed without any
/// gradient flow (frozen calculator tape).
pub fn compute_q_target(
    agent: &Agent,
    hp: &Hyperparams,
    batch: &Batch,
    task_head: usize,
    noise: &StepNoise,
) -> Result<Vec<f32>> {
    let b = batch.len();
    let mut tape = Tape::new();
    let (mean, log_std) = agent.nets.policy_forward(
        &mut tape,
        &agent.params,
        &batch.next_obs,
        task_head,
        ParamMode::Frozen,
    )?;
    tape.check_finite()?;

    let mean_v = tape.value(mean).data().to_vec();
    let std_v = tape.value(log_std).data().to_vec();
    let mut next_actions = Vec::with_capacity(b * ACTION_DIM);
    let mut log_probs = Vec::with_capacity(b);
    for row in 0..b {
        let lo = row * ACTION_DIM;
        let hi = lo + ACTION_DIM;
        let (a, lp) = sample_action_with_eps(
            &mean_v[lo..hi],
            &std_v[lo..hi],
            &noise.next_eps.data()[lo..hi],
        );
        next_actions.extend_from_slice(&a);
        log_probs.push(lp);
    }

    let act_node = tape.constant(RealArray::from_vec(&[b, ACTION_DIM], next_actions));
    let tq1 = agent.nets.q_forward(
        &mut tape,
        &agent.params,
        Net::TargetQ1,
        &batch.next_obs,
        act_node,
        task_head,
        ParamMode::Frozen,
    )?;
    let tq2 = agent.nets.q_forward(
        &mut tape,
        &agent.params,
        Net::TargetQ2,
        &batch.next_obs,
        act_node,
        task_head,
        ParamMode::Frozen,
    )?;
    tape.check_finite()?;

    let q1v = tape.value(tq1).data();
    let q2v = tape.value(tq2).data();
    Ok((0..b)
        .map(|i| {
            let min_q = q1v[i].min(q2v[i]);
            batch.rewards[i]
                + (1.0 - batch.dones[i]) * hp.gamma * (min_q - hp.alpha * log_probs[i])
        })
        .collect())
}

// ── critic losses ───────────────────────────────────────────────────

/// Candidate actions for the conservative penalty, laid out per row as
/// [a_data, n uniform, n policy samples]: a [B * (2n + 1), 7] matrix.
pub fn cql_candidates(
    agent: &Agent,
    hp: &Hyperparams,
    batch: &Batch,
    task_head: usize,
    noise: &StepNoise,
) -> Result<RealArray> {
    let b = batch.len();
    let n = hp.n_cql_samples;
    let mut tape = Tape::new();
    let (mean, log_std) = agent.nets.policy_forward(
        &mut tape,
        &agent.params,
        &batch.obs,
        task_head,
        ParamMode::Frozen,
    )?;
    tape.check_finite()?;
    let mean_v = tape.value(mean).data();
    let std_v = tape.value(log_std).data();

    let a_width = 2 * n + 1;
    let mut out = Vec::with_capacity(b * a_width * ACTION_DIM);
    for row in 0..b {
        let lo = row * ACTION_DIM;
        let hi = lo + ACTION_DIM;
        out.extend_from_slice(&batch.actions.data()[lo..hi]);
        for j in 0..n {
            let ulo = (row * n + j) * ACTION_DIM;
            out.extend_from_slice(&noise.cql_uniform.data()[ulo..ulo + ACTION_DIM]);
        }
        for j in 0..n {
            let elo = (row * n + j) * ACTION_DIM;
            let (a, _) = sample_action_with_eps(
                &mean_v[lo..hi],
                &std_v[lo..hi],
                &noise.cql_policy_eps.data()[elo..elo + ACTION_DIM],
            );
            out.extend_from_slice(&a);
        }
    }
    Ok(RealArray::from_vec(&[b * a_width, ACTION_DIM], out))
}

fn repeat_rows(src: &RealArray, times: usize) -> RealArray {
    let rows = src.shape()[0];
    let width: usize = src.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(rows * times * width);
    for r in 0..rows {
        for _ in 0..times {
            out.extend_from_slice(&src.data()[r * width..(r + 1) * width]);
        }
    }
    let mut shape = src.shape().to_vec();
    shape[0] = rows * times;
    RealArray::from_vec(&shape, out)
}

/// Values of both critic objectives on one tape:
///   J_Q(theta_i)   = 1/2 mean (y - Q_i(s, a))^2
///   penalty_i      = mean [ logsumexp_A Q_i(s, .) - Q_i(s, a_data) ]
///   total          = sum_i J_Q(theta_i) + alpha_cql * penalty_i
pub struct CriticLosses {
    pub tape: Tape,
    pub total: NodeId,
    pub q_loss: [f64; 2],
    pub cql_penalty: [f64; 2],
}

pub fn critic_losses(
    agent: &Agent,
    hp: &Hyperparams,
    batch: &Batch,
    targets: &[f32],
    candidates: &RealArray,
    task_head: usize,
) -> Result<CriticLosses> {
    let b = batch.len();
    let a_width = 2 * hp.n_cql_samples + 1;
    let mut tape = Tape::new();
    let act_data = tape.constant(batch.actions.clone());
    let y = tape.constant(RealArray::from_vec(&[b, 1], targets.to_vec()));
    let obs_rep = repeat_rows(&batch.obs, a_width);
    let cand_node = tape.constant(candidates.clone());

    let build = |tape: &mut Tape, net: Net| -> Result<(NodeId, f64, f64)> {
        let q_data = agent.nets.q_forward(
            tape,
            &agent.params,
            net,
            &batch.obs,
            act_data,
            task_head,
            ParamMode::Train,
        )?;
        let diff = tape.sub(y, q_data);
        let sq = tape.square(diff);
        let mse = tape.mean(sq);
        let j_q = tape.scale(mse, 0.5);

        let q_cand = agent.nets.q_forward(
            tape,
            &agent.params,
            net,
            &obs_rep,
            cand_node,
            task_head,
            ParamMode::Train,
        )?;
        let lse = tape.logsumexp_rows(q_cand, b, a_width)?;
        let q_data_flat = tape.reshape(q_data, &[b]);
        let gap = tape.sub(lse, q_data_flat);
        let penalty = tape.mean(gap);

        let scaled = tape.scale(penalty, hp.alpha_cql);
        let total = tape.add(j_q, scaled);
        Ok((
            total,
            tape.value(j_q).item() as f64,
            tape.value(penalty).item() as f64,
        ))
    };

    let (t1, j1, p1) = build(&mut tape, Net::Q1)?;
    let (t2, j2, p2) = build(&mut tape, Net::Q2)?;
    let total = tape.add(t1, t2);
    tape.check_finite()?;
    Ok(CriticLosses {
        tape,
        total,
        q_loss: [j1, j2],
        cql_penalty: [p1, p2],
    })
}

// ── actor losses ────────────────────────────────────────────────────

pub struct ActorLoss {
    pub tape: Tape,
    pub loss: NodeId,
    pub value: f64,
}

/// Reparameterized policy loss:
///   J_pi = mean [ alpha * log pi(a|s) - min(Q_1, Q_2)(s, a) ],
/// a = tanh(mean + sigma * eps). Critic parameters enter frozen.
pub fn policy_loss(
    agent: &Agent,
    hp: &Hyperparams,
    batch: &Batch,
    task_head: usize,
    noise: &StepNoise,
) -> Result<ActorLoss> {
    let b = batch.len();
    let mut tape = Tape::new();
    let (mean, log_std) = agent.nets.policy_forward(
        &mut tape,
        &agent.params,
        &batch.obs,
        task_head,
        ParamMode::Train,
    )?;
    let eps = tape.constant(noise.pi_eps.clone());
    let sigma = tape.exp(log_std);
    let scaled_eps = tape.mul(sigma, eps);
    let u = tape.add(mean, scaled_eps);
    let action = tape.tanh(u);

    // log N(u | mean, sigma) at the reparameterized point reduces to
    // -1/2 ln(2 pi) - log_std - eps^2 / 2 with eps constant.
    let base: Vec<f32> = noise
        .pi_eps
        .data()
        .iter()
        .map(|e| -0.5 * LN_2PI - 0.5 * e * e)
        .collect();
    let base_node = tape.constant(RealArray::from_vec(&[b, ACTION_DIM], base));
    let log_n = tape.sub(base_node, log_std);

    let a_sq = tape.square(action);
    let neg_sq = tape.scale(a_sq, -1.0);
    let one_minus = tape.add_scalar(neg_sq, 1.0 + TANH_EPS);
    let corr = tape.log(one_minus);
    let lp_elem = tape.sub(log_n, corr);
    let log_prob = tape.row_sum(lp_elem, b, ACTION_DIM);

    let (q1, q2) = agent.nets.q_pair(
        &mut tape,
        &agent.params,
        &batch.obs,
        action,
        task_head,
        ParamMode::Frozen,
    )?;
    let min_q = tape.min_elem(q1, q2);
    let min_q_flat = tape.reshape(min_q, &[b]);
    let ent = tape.scale(log_prob, hp.alpha);
    let inner = tape.sub(ent, min_q_flat);
    let loss = tape.mean(inner);
    tape.check_finite()?;
    let value = tape.value(loss).item() as f64;
    Ok(ActorLoss { tape, loss, value })
}

/// Behaviour cloning: negative mean log-likelihood of the dataset actions
/// under the tanh-Gaussian policy. Dataset actions are clamped into the
/// open interval before the inverse tanh.
pub fn bc_loss(agent: &Agent, batch: &Batch, task_head: usize) -> Result<ActorLoss> {
    let b = batch.len();
    let mut tape = Tape::new();
    let (mean, log_std) = agent.nets.policy_forward(
        &mut tape,
        &agent.params,
        &batch.obs,
        task_head,
        ParamMode::Train,
    )?;

    let mut u_data = Vec::with_capacity(b * ACTION_DIM);
    let mut corr = Vec::with_capacity(b * ACTION_DIM);
    for a in batch.actions.data() {
        let c = a.clamp(-ACTION_BOUND, ACTION_BOUND);
        u_data.push(atanh(c));
        corr.push((1.0 - c * c + TANH_EPS).ln());
    }
    let u_arr = RealArray::from_vec(&[b, ACTION_DIM], u_data);
    let log_n = tape.gauss_log_density(mean, log_std, &u_arr);
    let corr_node = tape.constant(RealArray::from_vec(&[b, ACTION_DIM], corr));
    let lp_elem = tape.sub(log_n, corr_node);
    let log_prob = tape.row_sum(lp_elem, b, ACTION_DIM);
    let mean_lp = tape.mean(log_prob);
    let loss = tape.scale(mean_lp, -1.0);
    tape.check_finite()?;
    let value = tape.value(loss).item() as f64;
    Ok(ActorLoss { tape, loss, value })
}

fn atanh(x: f32) -> f32 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

// ── the full step ───────────────────────────────────────────────────

fn filter_prefixes(grads: Grads, prefixes: &[&str]) -> Grads {
    grads
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .collect()
}

/// One complete SAC-CQL(-SI) gradient step on `batch`, which must come
/// from the current task's dataset. `step_in_task` selects the
/// behaviour-cloning warm start; the consolidation penalty applies from
/// the second task on. Any non-finite loss aborts with the offending op.
pub fn train_step(
    agent: &mut Agent,
    hp: &Hyperparams,
    batch: &Batch,
    si: &mut SIState,
    task_head: usize,
    step_in_task: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let noise = draw_step_noise(rng, batch.len(), hp.n_cql_samples);

    // (1) targets, then (2) critic update
    let targets = compute_q_target(agent, hp, batch, task_head, &noise)?;
    let candidates = cql_candidates(agent, hp, batch, task_head, &noise)?;
    let mut critic = critic_losses(agent, hp, batch, &targets, &candidates, task_head)?;
    let critic_grads = critic.tape.forward_backward(critic.total)?;
    let critic_grads = filter_prefixes(critic_grads, &["q1/", "q2/"]);
    adam_step(&mut agent.params, &critic_grads, &mut agent.critic_opt)?;

    // (3) actor update
    let bc_phase = step_in_task < hp.bc_steps;
    let mut record = LossRecord {
        step: step_in_task,
        q1: critic.q_loss[0],
        q2: critic.q_loss[1],
        cql1: critic.cql_penalty[0],
        cql2: critic.cql_penalty[1],
        ..Default::default()
    };

    let mut actor = if bc_phase {
        let l = bc_loss(agent, batch, task_head)?;
        record.bc = l.value;
        l
    } else {
        let l = policy_loss(agent, hp, batch, task_head, &noise)?;
        record.policy = l.value;
        l
    };
    let tape_grads = actor.tape.forward_backward(actor.loss)?;
    let mut actor_grads = filter_prefixes(tape_grads, &["policy/"]);

    if !bc_phase && si.task_index >= 2 && hp.si_c > 0.0 {
        let (si_value, si_grads) = si.penalty(&agent.params);
        record.si = hp.si_c as f64 * si_value;
        for (name, g) in actor_grads.iter_mut() {
            if let Some(sg) = si_grads.get(name) {
                for (gv, sv) in g.data_mut().iter_mut().zip(sg.data()) {
                    *gv += hp.si_c * sv;
                }
            }
        }
    }

    // (4) apply the update and feed the path integral with the realized move
    let before: ParamStore = actor_grads
        .keys()
        .map(|k| (k.clone(), agent.params[k].clone()))
        .collect();
    adam_step(&mut agent.params, &actor_grads, &mut agent.actor_opt)?;
    let mut delta = ParamStore::new();
    for (name, prev) in &before {
        let mut d = agent.params[name].clone();
        for (dv, pv) in d.data_mut().iter_mut().zip(prev.data()) {
            *dv -= pv;
        }
        delta.insert(name.clone(), d);
    }
    si.accumulate(&actor_grads, &delta)?;

    // (5) target sync
    target_sync(&mut agent.params, hp.tau)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ObsMode, TrunkConfig, VECTOR_OBS_DIM};
    use crate::rng::{derive, Stream};

    fn tiny_agent(seed: u64, n_tasks: usize) -> Agent {
        let nets = Nets::new(
            ObsMode::Vector,
            TrunkConfig {
                vector_widths: vec![8, 8],
                ..Default::default()
            },
            n_tasks,
        );
        Agent::new(nets, seed, 3e-4)
    }

    fn synthetic_batch(seed: u64, b: usize) -> Batch {
        let mut rng = derive(seed, Stream::Train, 99);
        let mut gen_obs = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..b * VECTOR_OBS_DIM)
                .map(|i| {
                    let k = i % VECTOR_OBS_DIM;
                    let c = crate::nets::VECTOR_OBS_CENTER[k];
                    let s = crate::nets::VECTOR_OBS_SCALE[k];
                    rng.gen_range(c - s..c + s)
                })
                .collect()
        };
        let obs = RealArray::from_vec(&[b, VECTOR_OBS_DIM], gen_obs(&mut rng));
        let next_obs = RealArray::from_vec(&[b, VECTOR_OBS_DIM], gen_obs(&mut rng));
        let actions = RealArray::from_vec(
            &[b, ACTION_DIM],
            (0..b * ACTION_DIM).map(|_| rng.gen_range(-0.99f32..0.99)).collect(),
        );
        let rewards = (0..b).map(|i| (i % 2) as f32).collect();
        let dones = (0..b).map(|i| if i == b - 1 { 1.0 } else { 0.0 }).collect();
        Batch {
            task: TaskKind::PressButton,
            obs,
            actions,
            rewards,
            next_obs,
            dones,
        }
    }

    fn hp_small() -> Hyperparams {
        Hyperparams {
            batch_size: 4,
            n_cql_samples: 2,
            bc_steps: 2,
            steps_per_task: 10,
            ..Default::default()
        }
    }

    #[test]
    fn gamma_zero_targets_equal_rewards() {
        let agent = tiny_agent(1, 1);
        let mut hp = hp_small();
        hp.gamma = 1e-9; // validate() requires > 0; the limit case
        let batch = synthetic_batch(2, 4);
        let mut rng = derive(3, Stream::Train, 0);
        let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
        let targets = compute_q_target(&agent, &hp, &batch, 0, &noise).unwrap();
        for (t, r) in targets.iter().zip(&batch.rewards) {
            assert!((t - r).abs() < 1e-5, "target {t} vs reward {r}");
        }
    }

    #[test]
    fn equal_targets_alpha_zero_bootstrap() {
        // alpha ~ 0 and identical target critics: y = r + gamma * Q'
        let mut agent = tiny_agent(5, 1);
        let copies: Vec<(String, RealArray)> = agent
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("tq1/"))
            .map(|(k, v)| (format!("tq2/{}", &k[4..]), v.clone()))
            .collect();
        agent.params.extend(copies);
        let mut hp = hp_small();
        hp.alpha = 1e-12;
        let batch = synthetic_batch(7, 4);
        let mut rng = derive(4, Stream::Train, 0);
        let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
        let targets = compute_q_target(&agent, &hp, &batch, 0, &noise).unwrap();

        // recompute Q' by hand through the same forward
        let mut tape = Tape::new();
        let (mean, log_std) = agent
            .nets
            .policy_forward(&mut tape, &agent.params, &batch.next_obs, 0, ParamMode::Frozen)
            .unwrap();
        let mv = tape.value(mean).data().to_vec();
        let sv = tape.value(log_std).data().to_vec();
        let mut acts = Vec::new();
        for row in 0..4 {
            let lo = row * ACTION_DIM;
            let (a, _) = sample_action_with_eps(
                &mv[lo..lo + ACTION_DIM],
                &sv[lo..lo + ACTION_DIM],
                &noise.next_eps.data()[lo..lo + ACTION_DIM],
            );
            acts.extend_from_slice(&a);
        }
        let an = tape.constant(RealArray::from_vec(&[4, ACTION_DIM], acts));
        let q = agent
            .nets
            .q_forward(
                &mut tape,
                &agent.params,
                Net::TargetQ1,
                &batch.next_obs,
                an,
                0,
                ParamMode::Frozen,
            )
            .unwrap();
        let qv = tape.value(q).data();
        for i in 0..4 {
            let expect = batch.rewards[i] + (1.0 - batch.dones[i]) * hp.gamma * qv[i];
            assert!((targets[i] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn q_loss_zero_when_critic_matches_targets() {
        // force constant-output critics (zero weights, bias = y)
        let mut agent = tiny_agent(9, 1);
        for name in agent.nets.names(&agent.params, Net::Q1) {
            let shape = agent.params[&name].shape().to_vec();
            agent.params.insert(name, RealArray::zeros(&shape));
        }
        agent
            .params
            .insert("q1/head0/b".into(), RealArray::from_vec(&[1], vec![2.5]));
        let batch = synthetic_batch(11, 4);
        let hp = hp_small();
        let mut rng = derive(5, Stream::Train, 0);
        let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
        let candidates = cql_candidates(&agent, &hp, &batch, 0, &noise).unwrap();
        let targets = vec![2.5f32; 4];
        let losses = critic_losses(&agent, &hp, &batch, &targets, &candidates, 0).unwrap();
        assert!(losses.q_loss[0].abs() < 1e-10);
        // constant offset delta on every row gives delta^2 / 2
        let off_targets = vec![3.5f32; 4];
        let losses2 = critic_losses(&agent, &hp, &batch, &off_targets, &candidates, 0).unwrap();
        assert!((losses2.q_loss[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cql_penalty_is_log_n_for_constant_q() {
        // constant critic: logsumexp over A equal values minus the data
        // value is exactly ln |A|
        let mut agent = tiny_agent(13, 1);
        for net in ["q1", "q2"] {
            for name in agent
                .params
                .keys()
                .filter(|k| k.starts_with(&format!("{net}/")))
                .cloned()
                .collect::<Vec<_>>()
            {
                let shape = agent.params[&name].shape().to_vec();
                agent.params.insert(name, RealArray::zeros(&shape));
            }
        }
        let batch = synthetic_batch(17, 4);
        let hp = hp_small();
        let mut rng = derive(6, Stream::Train, 0);
        let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
        let candidates = cql_candidates(&agent, &hp, &batch, 0, &noise).unwrap();
        let targets = vec![0.0f32; 4];
        let losses = critic_losses(&agent, &hp, &batch, &targets, &candidates, 0).unwrap();
        let n_total = (2 * hp.n_cql_samples + 1) as f64;
        assert!((losses.cql_penalty[0] - n_total.ln()).abs() < 1e-6);
        assert!((losses.cql_penalty[1] - n_total.ln()).abs() < 1e-6);
    }

    #[test]
    fn cql_penalty_nonnegative_with_data_in_candidates() {
        let agent = tiny_agent(19, 1);
        let hp = hp_small();
        for seed in 0..16 {
            let batch = synthetic_batch(seed + 100, 4);
            let mut rng = derive(seed, Stream::Train, 1);
            let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
            let candidates = cql_candidates(&agent, &hp, &batch, 0, &noise).unwrap();
            let targets = vec![0.0f32; 4];
            let losses = critic_losses(&agent, &hp, &batch, &targets, &candidates, 0).unwrap();
            assert!(losses.cql_penalty[0] >= 0.0);
            assert!(losses.cql_penalty[1] >= 0.0);
        }
    }

    #[test]
    fn policy_loss_is_negative_min_q_when_alpha_zero() {
        // constant critics Q = c: J_pi = -c whatever the policy says
        let mut agent = tiny_agent(23, 1);
        for net in ["q1", "q2"] {
            for name in agent
                .params
                .keys()
                .filter(|k| k.starts_with(&format!("{net}/")))
                .cloned()
                .collect::<Vec<_>>()
            {
                let shape = agent.params[&name].shape().to_vec();
                agent.params.insert(name, RealArray::zeros(&shape));
            }
        }
        agent
            .params
            .insert("q1/head0/b".into(), RealArray::from_vec(&[1], vec![1.75]));
        agent
            .params
            .insert("q2/head0/b".into(), RealArray::from_vec(&[1], vec![4.0]));
        let mut hp = hp_small();
        hp.alpha = 1e-12;
        let batch = synthetic_batch(29, 4);
        let mut rng = derive(8, Stream::Train, 0);
        let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
        let l = policy_loss(&agent, &hp, &batch, 0, &noise).unwrap();
        assert!((l.value + 1.75).abs() < 1e-4, "got {}", l.value);
    }

    #[test]
    fn bc_mode_value_at_zero_residual() {
        // dataset action = tanh(mean), log_std = 0: per-dim density is the
        // standard-normal mode, corrected by the squash term
        let mut agent = tiny_agent(31, 1);
        for name in agent.nets.actor_names(&agent.params) {
            let shape = agent.params[&name].shape().to_vec();
            agent.params.insert(name, RealArray::zeros(&shape));
        }
        agent.params.insert(
            "policy/head0/mean_b".into(),
            RealArray::full(&[ACTION_DIM], 0.3),
        );
        let mut batch = synthetic_batch(37, 4);
        let a = 0.3f32.tanh();
        batch.actions = RealArray::full(&[4, ACTION_DIM], a);
        let l = bc_loss(&agent, &batch, 0).unwrap();
        let expect = -(ACTION_DIM as f64)
            * (-0.5 * (LN_2PI as f64) - ((1.0 - (a * a) as f64) + TANH_EPS as f64).ln());
        assert!((l.value - expect).abs() < 1e-3, "{} vs {}", l.value, expect);
    }

    #[test]
    fn bc_handles_saturated_actions() {
        let agent = tiny_agent(41, 1);
        let mut batch = synthetic_batch(43, 4);
        batch.actions = RealArray::full(&[4, ACTION_DIM], 1.0); // exactly +-1
        let l = bc_loss(&agent, &batch, 0).unwrap();
        assert!(l.value.is_finite());
    }

    #[test]
    fn bc_descends_on_single_sample() {
        let mut agent = tiny_agent(47, 1);
        let mut batch = synthetic_batch(53, 1);
        batch.actions = RealArray::from_vec(
            &[1, ACTION_DIM],
            vec![0.4, -0.2, 0.1, 0.0, 0.3, -0.5, 0.9],
        );
        let mut si = SIState::new(
            &agent.params,
            &agent.nets.actor_names(&agent.params),
            1e-3,
        );
        let hp = Hyperparams {
            bc_steps: 1000,
            lr: 1e-3,
            batch_size: 1,
            n_cql_samples: 1,
            ..Default::default()
        };
        let mut rng = derive(10, Stream::Train, 0);
        let first = bc_loss(&agent, &batch, 0).unwrap().value;
        for step in 0..100 {
            train_step(&mut agent, &hp, &batch, &mut si, 0, step, &mut rng).unwrap();
        }
        let last = bc_loss(&agent, &batch, 0).unwrap().value;
        assert!(last < first, "bc loss should fall: {first} -> {last}");
    }

    #[test]
    fn actor_update_leaves_critics_and_other_heads_untouched() {
        let mut agent = tiny_agent(59, 2);
        let batch = synthetic_batch(61, 4);
        let mut si = SIState::new(
            &agent.params,
            &agent.nets.actor_names(&agent.params),
            1e-3,
        );
        let hp = hp_small();
        let mut rng = derive(11, Stream::Train, 0);
        let before = agent.params.clone();
        // bc phase step (step 0 < bc_steps)
        train_step(&mut agent, &hp, &batch, &mut si, 0, 0, &mut rng).unwrap();
        for part in ["mean_w", "mean_b", "logstd_w", "logstd_b"] {
            let key = format!("policy/head1/{part}");
            assert_eq!(agent.params[&key].data(), before[&key].data(), "{key} moved");
        }
        // critics must have moved (critic update), policy head 0 as well
        assert_ne!(agent.params["q1/head0/w"].data(), before["q1/head0/w"].data());
        assert_ne!(
            agent.params["policy/head0/mean_b"].data(),
            before["policy/head0/mean_b"].data()
        );
    }

    #[test]
    fn critic_grads_do_not_touch_targets_or_policy() {
        let agent = tiny_agent(67, 1);
        let hp = hp_small();
        let batch = synthetic_batch(71, 4);
        let mut rng = derive(12, Stream::Train, 0);
        let noise = draw_step_noise(&mut rng, 4, hp.n_cql_samples);
        let targets = compute_q_target(&agent, &hp, &batch, 0, &noise).unwrap();
        let candidates = cql_candidates(&agent, &hp, &batch, 0, &noise).unwrap();
        let mut losses = critic_losses(&agent, &hp, &batch, &targets, &candidates, 0).unwrap();
        let grads = losses.tape.forward_backward(losses.total).unwrap();
        assert!(grads.keys().all(|k| k.starts_with("q1/") || k.starts_with("q2/")));
    }

    #[test]
    fn c_zero_step_is_bitwise_plain_step() {
        let mk = || {
            let mut agent = tiny_agent(73, 2);
            let names = agent.nets.actor_names(&agent.params);
            let mut si = SIState::new(&agent.params, &names, 1e-3);
            // fake a finished first task with importance
            si.consolidate(&agent.params.clone());
            for arr in si.importance.values_mut() {
                arr.data_mut().fill(3.0);
            }
            // move reference away so a nonzero penalty would apply
            for arr in si.ref_weights.values_mut() {
                for v in arr.data_mut() {
                    *v += 0.05;
                }
            }
            (agent, si)
        };
        let batch = synthetic_batch(79, 4);
        let hp_plain = Hyperparams { si_c: 0.0, bc_steps: 0, ..hp_small() };
        let hp_si = Hyperparams { si_c: 1.0, bc_steps: 0, ..hp_small() };

        let (mut a1, mut s1) = mk();
        let mut r1 = derive(13, Stream::Train, 0);
        train_step(&mut a1, &hp_plain, &batch, &mut s1, 1, 0, &mut r1).unwrap();

        let (mut a2, mut s2) = mk();
        let mut r2 = derive(13, Stream::Train, 0);
        let rec = train_step(&mut a2, &hp_si, &batch, &mut s2, 1, 0, &mut r2).unwrap();
        assert!(rec.si != 0.0, "si penalty should be active in the si arm");

        let (mut a3, mut s3) = mk();
        let mut r3 = derive(13, Stream::Train, 0);
        let rec3 = train_step(&mut a3, &hp_plain, &batch, &mut s3, 1, 0, &mut r3).unwrap();
        assert_eq!(rec3.si, 0.0);
        // c = 0 runs are bitwise identical to each other
        for (k, v) in &a1.params {
            assert_eq!(v.data(), a3.params[k].data(), "{k}");
        }
        // and differ from the si run on the trained parameters
        assert_ne!(
            a1.params["policy/trunk/fc0/w"].data(),
            a2.params["policy/trunk/fc0/w"].data()
        );
    }

    #[test]
    fn training_is_deterministic_bitwise() {
        let run = || {
            let mut agent = tiny_agent(83, 1);
            let names = agent.nets.actor_names(&agent.params);
            let mut si = SIState::new(&agent.params, &names, 1e-3);
            let hp = hp_small();
            let mut rng = derive(14, Stream::Train, 0);
            for step in 0..5 {
                let batch = synthetic_batch(200 + step, 4);
                train_step(&mut agent, &hp, &batch, &mut si, 0, step, &mut rng).unwrap();
            }
            agent
        };
        let a = run();
        let b = run();
        for (k, v) in &a.params {
            assert_eq!(v.data(), b.params[k].data(), "{k} diverged");
        }
    }

    #[test]
    fn first_task_never_applies_si_penalty() {
        let mut agent = tiny_agent(89, 1);
        let names = agent.nets.actor_names(&agent.params);
        let mut si = SIState::new(&agent.params, &names, 1e-3);
        for arr in si.importance.values_mut() {
            arr.data_mut().fill(100.0);
        }
        let hp = Hyperparams { bc_steps: 0, ..hp_small() };
        let batch = synthetic_batch(97, 4);
        let mut rng = derive(15, Stream::Train, 0);
        let rec = train_step(&mut agent, &hp, &batch, &mut si, 0, 0, &mut rng).unwrap();
        assert_eq!(rec.si, 0.0);
    }
}
