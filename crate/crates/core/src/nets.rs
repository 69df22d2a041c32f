//! The five networks: a multi-head tanh-Gaussian policy, two Q networks,
//! and their two target copies.
//!
//! All nets share one trunk topology (per observation mode) but own their
//! parameters. Heads are one affine layer per task; training task `i`
//! touches only head `i` plus the trunk, so the other heads stay bitwise
//! frozen.
//!
//! Parameter naming (keys into [`ParamStore`]):
//!   policy/trunk/fc0/w         q1/trunk/fc0/w_obs   q1/trunk/fc0/w_act
//!   policy/head3/mean_w        q2/head0/w           tq1/... (target copies)

use crate::array::{ParamStore, RealArray};
use crate::error::{CsrlError, Result};
use crate::rng::{derive, Stream};
use crate::tape::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ACTION_DIM: usize = 7;
pub const VECTOR_OBS_DIM: usize = 10;
pub const IMAGE_H: usize = 48;
pub const IMAGE_W: usize = 48;
pub const IMAGE_C: usize = 3;

pub const LOG_STD_MIN: f32 = -20.0;
pub const LOG_STD_MAX: f32 = 2.0;
/// Added inside log(1 - tanh(u)^2 + eps) so squashed log-probs stay finite.
pub const TANH_EPS: f32 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453;

/// Fixed affine normalization (v - center) / scale applied to the raw
/// vector observation [gx, gy, gz, aperture, ox, oy, oz, extension,
/// height, grasped] before the first dense layer. Centers and scales are
/// chosen so desk-scale states span roughly [-1, 1] per feature; the
/// task-relevant offsets (object minus gripper) then sit at a magnitude
/// the first layer resolves without growing large weights.
pub const VECTOR_OBS_CENTER: [f32; VECTOR_OBS_DIM] =
    [0.0, 25.0, 10.0, 0.5, 0.0, 30.0, 5.0, 3.0, 5.0, 0.5];
pub const VECTOR_OBS_SCALE: [f32; VECTOR_OBS_DIM] =
    [5.0, 10.0, 10.0, 0.5, 5.0, 10.0, 5.0, 3.0, 5.0, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Vector,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Trunk architecture shared (in shape) by all five networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    /// Dense widths for vector observations.
    pub vector_widths: Vec<usize>,
    /// Conv stack for image observations.
    pub conv: Vec<ConvSpec>,
    /// Dense widths applied after the conv flatten.
    pub image_dense: Vec<usize>,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            vector_widths: vec![256, 256],
            conv: vec![
                ConvSpec { channels: 16, kernel: 3, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 2 },
            ],
            image_dense: vec![256],
        }
    }
}

/// Which of the five parameter groups a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Policy,
    Q1,
    Q2,
    TargetQ1,
    TargetQ2,
}

/// Whether a forward pass registers parameters as trainable tape leaves
/// or freezes them as constants (no gradients reported or accumulated).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Train,
    Frozen,
}

impl Net {
    pub fn prefix(self) -> &'static str {
        match self {
            Net::Policy => "policy",
            Net::Q1 => "q1",
            Net::Q2 => "q2",
            Net::TargetQ1 => "tq1",
            Net::TargetQ2 => "tq2",
        }
    }

    fn is_critic(self) -> bool {
        !matches!(self, Net::Policy)
    }
}

/// Network topology descriptor: builds parameters and tape forwards.
#[derive(Debug, Clone)]
pub struct Nets {
    pub obs_mode: ObsMode,
    pub trunk: TrunkConfig,
    pub n_tasks: usize,
}

impl Nets {
    pub fn new(obs_mode: ObsMode, trunk: TrunkConfig, n_tasks: usize) -> Self {
        assert!(n_tasks >= 1, "need at least one task head");
        match obs_mode {
            ObsMode::Vector => assert!(!trunk.vector_widths.is_empty()),
            ObsMode::Image => {
                assert!(!trunk.conv.is_empty() && !trunk.image_dense.is_empty())
            }
        }
        Nets { obs_mode, trunk, n_tasks }
    }

    /// Trunk output feature width.
    pub fn feature_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::Vector => *self.trunk.vector_widths.last().unwrap(),
            ObsMode::Image => *self.trunk.image_dense.last().unwrap(),
        }
    }

    fn conv_output(&self) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = (IMAGE_H, IMAGE_W, IMAGE_C);
        for spec in &self.trunk.conv {
            h = (h - spec.kernel) / spec.stride + 1;
            w = (w - spec.kernel) / spec.stride + 1;
            c = spec.channels;
        }
        (c, h, w)
    }

    fn flat_dim(&self) -> usize {
        let (c, h, w) = self.conv_output();
        c * h * w
    }

    // ── initialization ──────────────────────────────────────────────

    /// All five networks, weights uniform in ±1/sqrt(fan_in), biases zero.
    /// Target critics start as exact copies of the online critics.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = derive(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        for net in [Net::Policy, Net::Q1, Net::Q2] {
            self.init_net(net, &mut rng, &mut store);
        }
        for (online, target) in [(Net::Q1, Net::TargetQ1), (Net::Q2, Net::TargetQ2)] {
            let entries: Vec<(String, RealArray)> = store
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{}/", online.prefix())))
                .map(|(k, v)| {
                    let suffix = &k[online.prefix().len()..];
                    (format!("{}{}", target.prefix(), suffix), v.clone())
                })
                .collect();
            store.extend(entries);
        }
        store
    }

    fn init_net(&self, net: Net, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        let p = net.prefix();
        let feat = self.feature_dim();
        match self.obs_mode {
            ObsMode::Vector => {
                let mut inp = VECTOR_OBS_DIM;
                for (i, &width) in self.trunk.vector_widths.iter().enumerate() {
                    if i == 0 && net.is_critic() {
                        let fan_in = inp + ACTION_DIM;
                        store.insert(
                            format!("{p}/trunk/fc0/w_obs"),
                            uniform_init(&[inp, width], fan_in, rng),
                        );
                        store.insert(
                            format!("{p}/trunk/fc0/w_act"),
                            uniform_init(&[ACTION_DIM, width], fan_in, rng),
                        );
                    } else {
                        store.insert(
                            format!("{p}/trunk/fc{i}/w"),
                            uniform_init(&[inp, width], inp, rng),
                        );
                    }
                    store.insert(format!("{p}/trunk/fc{i}/b"), RealArray::zeros(&[width]));
                    inp = width;
                }
            }
            ObsMode::Image => {
                let mut cin = IMAGE_C;
                for (i, spec) in self.trunk.conv.iter().enumerate() {
                    let fan_in = cin * spec.kernel * spec.kernel;
                    store.insert(
                        format!("{p}/trunk/conv{i}/w"),
                        uniform_init(&[spec.channels, cin, spec.kernel, spec.kernel], fan_in, rng),
                    );
                    store.insert(
                        format!("{p}/trunk/conv{i}/b"),
                        RealArray::zeros(&[spec.channels]),
                    );
                    cin = spec.channels;
                }
                let mut inp = self.flat_dim();
                for (i, &width) in self.trunk.image_dense.iter().enumerate() {
                    if i == 0 && net.is_critic() {
                        let fan_in = inp + ACTION_DIM;
                        store.insert(
                            format!("{p}/trunk/fc0/w_obs"),
                            uniform_init(&[inp, width], fan_in, rng),
                        );
                        store.insert(
                            format!("{p}/trunk/fc0/w_act"),
                            uniform_init(&[ACTION_DIM, width], fan_in, rng),
                        );
                    } else {
                        store.insert(
                            format!("{p}/trunk/fc{i}/w"),
                            uniform_init(&[inp, width], inp, rng),
                        );
                    }
                    store.insert(format!("{p}/trunk/fc{i}/b"), RealArray::zeros(&[width]));
                    inp = width;
                }
            }
        }
        for head in 0..self.n_tasks {
            if net == Net::Policy {
                store.insert(
                    format!("{p}/head{head}/mean_w"),
                    uniform_init(&[feat, ACTION_DIM], feat, rng),
                );
                store.insert(format!("{p}/head{head}/mean_b"), RealArray::zeros(&[ACTION_DIM]));
                store.insert(
                    format!("{p}/head{head}/logstd_w"),
                    uniform_init(&[feat, ACTION_DIM], feat, rng),
                );
                store.insert(
                    format!("{p}/head{head}/logstd_b"),
                    RealArray::zeros(&[ACTION_DIM]),
                );
            } else {
                store.insert(
                    format!("{p}/head{head}/w"),
                    uniform_init(&[feat, 1], feat, rng),
                );
                store.insert(format!("{p}/head{head}/b"), RealArray::zeros(&[1]));
            }
        }
    }

    /// Names belonging to one network, in lexicographic order.
    pub fn names(&self, store: &ParamStore, net: Net) -> Vec<String> {
        let prefix = format!("{}/", net.prefix());
        store
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }

    /// Actor (policy) parameter names — the SI-regularised set.
    pub fn actor_names(&self, store: &ParamStore) -> Vec<String> {
        self.names(store, Net::Policy)
    }

    // ── tape forwards ───────────────────────────────────────────────

    /// Normalizes and uploads a raw observation batch as a tape constant.
    /// Vector rows get the fixed [`VECTOR_OBS_CENTER`]/[`VECTOR_OBS_SCALE`]
    /// affine; image batches are expected already channel-first in [0, 1].
    pub fn obs_constant(&self, tape: &mut Tape, obs: &RealArray) -> NodeId {
        match self.obs_mode {
            ObsMode::Vector => {
                let mut scaled = obs.clone();
                for (i, v) in scaled.data_mut().iter_mut().enumerate() {
                    let k = i % VECTOR_OBS_DIM;
                    *v = (*v - VECTOR_OBS_CENTER[k]) / VECTOR_OBS_SCALE[k];
                }
                tape.constant(scaled)
            }
            ObsMode::Image => tape.constant(obs.clone()),
        }
    }

    /// Trunk features for `net`. Critics must pass the action node, which
    /// joins the first dense layer as a second affine block.
    pub fn features(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        net: Net,
        obs_node: NodeId,
        action: Option<NodeId>,
        mode: ParamMode,
    ) -> Result<NodeId> {
        assert_eq!(net.is_critic(), action.is_some(), "critic forwards take the action");
        let p = net.prefix();
        let param = |tape: &mut Tape, name: String| -> NodeId {
            let value = params
                .get(&name)
                .unwrap_or_else(|| panic!("missing param {name}"));
            match mode {
                ParamMode::Train => tape.param(&name, value),
                ParamMode::Frozen => tape.constant(value.clone()),
            }
        };

        let mut x = obs_node;
        if self.obs_mode == ObsMode::Image {
            let batch = tape.value(obs_node).shape()[0];
            for i in 0..self.trunk.conv.len() {
                let w = param(tape, format!("{p}/trunk/conv{i}/w"));
                let b = param(tape, format!("{p}/trunk/conv{i}/b"));
                let c = tape.conv2d(x, w, self.trunk.conv[i].stride)?;
                let sh = tape.value(c).shape().to_vec();
                let biased = tape.add_bias(c, b, sh[2] * sh[3]);
                x = tape.relu(biased);
            }
            x = tape.reshape(x, &[batch, self.flat_dim()]);
        }

        let widths = match self.obs_mode {
            ObsMode::Vector => &self.trunk.vector_widths,
            ObsMode::Image => &self.trunk.image_dense,
        };
        for (i, _) in widths.iter().enumerate() {
            let z = if i == 0 && net.is_critic() {
                let w_obs = param(tape, format!("{p}/trunk/fc0/w_obs"));
                let w_act = param(tape, format!("{p}/trunk/fc0/w_act"));
                let zo = tape.matmul(x, w_obs);
                let za = tape.matmul(action.unwrap(), w_act);
                tape.add(zo, za)
            } else {
                let w = param(tape, format!("{p}/trunk/fc{i}/w"));
                tape.matmul(x, w)
            };
            let b = param(tape, format!("{p}/trunk/fc{i}/b"));
            let zb = tape.add_bias(z, b, 1);
            x = tape.relu(zb);
        }
        Ok(x)
    }

    /// Policy head for one task: (mean, log_std) nodes of shape [B, 7],
    /// log_std clamped to [-20, 2].
    pub fn policy_forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        obs: &RealArray,
        task: usize,
        mode: ParamMode,
    ) -> Result<(NodeId, NodeId)> {
        self.check_task(task)?;
        let obs_node = self.obs_constant(tape, obs);
        let feat = self.features(tape, params, Net::Policy, obs_node, None, mode)?;
        self.policy_head(tape, params, feat, task, mode)
    }

    /// Head applied to an existing feature node (lets callers share the
    /// trunk across several heads or reuse features).
    pub fn policy_head(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        feat: NodeId,
        task: usize,
        mode: ParamMode,
    ) -> Result<(NodeId, NodeId)> {
        self.check_task(task)?;
        let param = |tape: &mut Tape, name: String| -> NodeId {
            match mode {
                ParamMode::Train => tape.param(&name, &params[&name]),
                ParamMode::Frozen => tape.constant(params[&name].clone()),
            }
        };
        let mw = param(tape, format!("policy/head{task}/mean_w"));
        let mb = param(tape, format!("policy/head{task}/mean_b"));
        let lw = param(tape, format!("policy/head{task}/logstd_w"));
        let lb = param(tape, format!("policy/head{task}/logstd_b"));
        let mz = tape.matmul(feat, mw);
        let mean = tape.add_bias(mz, mb, 1);
        let lz = tape.matmul(feat, lw);
        let log_std_raw = tape.add_bias(lz, lb, 1);
        let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// Q-value of (obs, action) under one critic: node of shape [B, 1].
    pub fn q_forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        net: Net,
        obs: &RealArray,
        action: NodeId,
        task: usize,
        mode: ParamMode,
    ) -> Result<NodeId> {
        assert!(net.is_critic());
        self.check_task(task)?;
        let obs_node = self.obs_constant(tape, obs);
        let feat = self.features(tape, params, net, obs_node, Some(action), mode)?;
        let p = net.prefix();
        let head = |tape: &mut Tape, name: String| -> NodeId {
            match mode {
                ParamMode::Train => tape.param(&name, &params[&name]),
                ParamMode::Frozen => tape.constant(params[&name].clone()),
            }
        };
        let w = head(tape, format!("{p}/head{task}/w"));
        let b = head(tape, format!("{p}/head{task}/b"));
        let z = tape.matmul(feat, w);
        Ok(tape.add_bias(z, b, 1))
    }

    /// Both online critics at once.
    pub fn q_pair(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        obs: &RealArray,
        action: NodeId,
        task: usize,
        mode: ParamMode,
    ) -> Result<(NodeId, NodeId)> {
        let q1 = self.q_forward(tape, params, Net::Q1, obs, action, task, mode)?;
        let q2 = self.q_forward(tape, params, Net::Q2, obs, action, task, mode)?;
        Ok((q1, q2))
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.n_tasks {
            Err(CsrlError::UnknownTask { index: task, heads: self.n_tasks })
        } else {
            Ok(())
        }
    }

    /// Deterministic evaluation action for a single raw observation:
    /// tanh of the head mean.
    pub fn eval_action(
        &self,
        params: &ParamStore,
        obs_row: &[f32],
        task: usize,
    ) -> Result<[f32; ACTION_DIM]> {
        let shape: Vec<usize> = match self.obs_mode {
            ObsMode::Vector => vec![1, VECTOR_OBS_DIM],
            ObsMode::Image => vec![1, IMAGE_C, IMAGE_H, IMAGE_W],
        };
        let obs = RealArray::from_vec(&shape, obs_row.to_vec());
        let mut tape = Tape::new();
        let (mean, _) = self.policy_forward(&mut tape, params, &obs, task, ParamMode::Frozen)?;
        tape.check_finite()?;
        let mut out = [0.0f32; ACTION_DIM];
        for (o, m) in out.iter_mut().zip(tape.value(mean).data()) {
            *o = m.tanh();
        }
        Ok(out)
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> RealArray {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    RealArray::from_vec(shape, data)
}

// ── sampling ────────────────────────────────────────────────────────

/// Squashed actions live strictly inside (-1, 1); f32 tanh saturates to
/// exactly +-1 for |u| > ~9, so samples are nudged back to this bound.
pub const ACTION_BOUND: f32 = 1.0 - 1e-6;

/// tanh-Gaussian sample from pre-drawn standard normal noise.
/// Returns the squashed action and its log-density under the policy:
/// log pi(a) = sum_k [ log N(u_k | mean, sigma) - log(1 - tanh(u_k)^2 + eps) ].
pub fn sample_action_with_eps(
    mean: &[f32],
    log_std: &[f32],
    eps: &[f32],
) -> (Vec<f32>, f32) {
    debug_assert_eq!(mean.len(), log_std.len());
    debug_assert_eq!(mean.len(), eps.len());
    let mut action = Vec::with_capacity(mean.len());
    let mut log_prob = 0.0f64;
    for k in 0..mean.len() {
        let sigma = log_std[k].exp();
        let u = mean[k] + sigma * eps[k];
        let a = u.tanh().clamp(-ACTION_BOUND, ACTION_BOUND);
        action.push(a);
        // log N(u | mean, sigma) with (u - mean)/sigma = eps by construction
        let log_n = -0.5 * LN_2PI - log_std[k] as f64 - 0.5 * (eps[k] as f64) * (eps[k] as f64);
        let corr = (1.0 - (a as f64) * (a as f64) + TANH_EPS as f64).ln();
        log_prob += log_n - corr;
    }
    (action, log_prob as f32)
}

/// tanh-Gaussian sample drawing its own noise.
pub fn sample_action<R: Rng>(
    mean: &[f32],
    log_std: &[f32],
    rng: &mut R,
) -> (Vec<f32>, f32) {
    let eps: Vec<f32> = (0..mean.len())
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    sample_action_with_eps(mean, log_std, &eps)
}

/// Polyak update of both target critics toward their online twins:
/// theta_hat <- tau * theta + (1 - tau) * theta_hat, elementwise.
pub fn target_sync(params: &mut ParamStore, tau: f32) -> Result<()> {
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1]");
    let pairs = [("q1/", "tq1/"), ("q2/", "tq2/")];
    let mut updates: Vec<(String, RealArray)> = Vec::new();
    for (online_prefix, target_prefix) in pairs {
        for (name, online) in params.iter().filter(|(k, _)| k.starts_with(online_prefix)) {
            let tname = format!("{}{}", target_prefix, &name[online_prefix.len()..]);
            let target = params.get(&tname).ok_or_else(|| CsrlError::ShapeMismatch {
                context: format!("target_sync: missing `{tname}`"),
                expected: online.shape().to_vec(),
                got: vec![],
            })?;
            if target.shape() != online.shape() {
                return Err(CsrlError::ShapeMismatch {
                    context: format!("target_sync `{tname}`"),
                    expected: online.shape().to_vec(),
                    got: target.shape().to_vec(),
                });
            }
            let mut merged = target.clone();
            for (t, o) in merged.data_mut().iter_mut().zip(online.data()) {
                *t = tau * o + (1.0 - tau) * *t;
            }
            updates.push((tname, merged));
        }
    }
    for (name, arr) in updates {
        params.insert(name, arr);
    }
    Ok(())
}
