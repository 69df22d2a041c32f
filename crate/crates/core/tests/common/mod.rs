//! Shared test oracles: central finite differences over tape-built
//! losses, and a straight-line scalar reimplementation of every loss the
//! learner computes. Both stay independent of the reverse-mode path they
//! check: finite differences only ever evaluate forward values, and the
//! scalar oracle reimplements the math from the parameter arrays up.

#![allow(dead_code)]

use csrl_core::array::{ParamStore, RealArray};
use csrl_core::learner::{Batch, Hyperparams, StepNoise};
use csrl_core::nets::{
    ACTION_BOUND, ACTION_DIM, LOG_STD_MAX, LOG_STD_MIN, TANH_EPS, VECTOR_OBS_CENTER,
    VECTOR_OBS_DIM, VECTOR_OBS_SCALE,
};
use csrl_core::si::SIState;
use csrl_core::tape::{NodeId, Tape};

pub const FD_H: f32 = 1e-3;
pub const FD_RTOL: f64 = 1e-3;
/// Absolute floor at the f32 central-difference noise level for O(1)
/// losses: rounding of the two loss evaluations alone contributes up to
/// ~1e-7 / (2 * 1e-3) = 5e-5 of gradient error.
pub const FD_ATOL: f64 = 3e-4;

pub fn fd_close(ad: f64, fd: f64) -> bool {
    let err = (ad - fd).abs();
    err <= FD_RTOL * ad.abs().max(fd.abs()) || err <= FD_ATOL
}

/// Checks reverse-mode gradients of `build` (params -> scalar loss node)
/// against central differences for every element of every parameter.
/// Returns the worst (name, index, ad, fd) on failure.
pub fn fd_check(
    params: &ParamStore,
    build: &dyn Fn(&mut Tape, &ParamStore) -> NodeId,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.forward_backward(loss).expect("backward failed");

    let value_of = |p: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let node = build(&mut t, p);
        t.value(node).item() as f64
    };

    for (name, grad) in &grads {
        for i in 0..grad.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_H;
            let fd = (value_of(&plus) - value_of(&minus)) / (2.0 * FD_H as f64);
            let ad = grad.data()[i] as f64;
            if !fd_close(ad, fd) {
                return Err(format!(
                    "gradient mismatch at {name}[{i}]: reverse-mode {ad}, finite-difference {fd}"
                ));
            }
        }
    }
    Ok(())
}

/// Central finite differences of an arbitrary scalar function of the
/// parameter store (used for losses that are not a single tape, e.g. the
/// SI-regularised actor total).
pub fn fd_check_fn(
    params: &ParamStore,
    names: &[String],
    value: &dyn Fn(&ParamStore) -> f64,
    grads: &ParamStore,
) -> Result<(), String> {
    for name in names {
        let g = &grads[name];
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_H;
            let fd = (value(&plus) - value(&minus)) / (2.0 * FD_H as f64);
            let ad = g.data()[i] as f64;
            if !fd_close(ad, fd) {
                return Err(format!(
                    "gradient mismatch at {name}[{i}]: analytic {ad}, finite-difference {fd}"
                ));
            }
        }
    }
    Ok(())
}

// ── straight-line scalar oracle ─────────────────────────────────────
//
// Reimplements the vector-mode forward passes and every loss with plain
// f64 loops over the named parameter arrays. No tape, no shared forward
// code.

pub mod oracle {
    use super::*;

    const LN_2PI: f64 = 1.8378770664093453;

    fn matvec(params: &ParamStore, key: &str, x: &[f64]) -> Vec<f64> {
        let w = &params[key];
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(rows, x.len());
        let mut out = vec![0.0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += x[r] * w.data()[r * cols + c] as f64;
            }
        }
        out
    }

    fn add_bias(params: &ParamStore, key: &str, x: &mut [f64]) {
        for (v, b) in x.iter_mut().zip(params[key].data()) {
            *v += *b as f64;
        }
    }

    fn relu(x: &mut [f64]) {
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    fn normalized(obs_row: &[f32]) -> Vec<f64> {
        obs_row
            .iter()
            .enumerate()
            // the network normalizes in f32; mirror that rounding
            .map(|(i, v)| {
                let k = i % VECTOR_OBS_DIM;
                ((*v - VECTOR_OBS_CENTER[k]) / VECTOR_OBS_SCALE[k]) as f64
            })
            .collect()
    }

    /// Policy trunk + head for one raw observation row.
    pub fn policy_forward(
        params: &ParamStore,
        widths: &[usize],
        obs_row: &[f32],
        task: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut x = normalized(obs_row);
        for (i, _) in widths.iter().enumerate() {
            let mut z = matvec(params, &format!("policy/trunk/fc{i}/w"), &x);
            add_bias(params, &format!("policy/trunk/fc{i}/b"), &mut z);
            relu(&mut z);
            x = z;
        }
        let mut mean = matvec(params, &format!("policy/head{task}/mean_w"), &x);
        add_bias(params, &format!("policy/head{task}/mean_b"), &mut mean);
        let mut log_std = matvec(params, &format!("policy/head{task}/logstd_w"), &x);
        add_bias(params, &format!("policy/head{task}/logstd_b"), &mut log_std);
        for v in log_std.iter_mut() {
            *v = v.clamp(LOG_STD_MIN as f64, LOG_STD_MAX as f64);
        }
        (mean, log_std)
    }

    /// Critic forward: first dense layer takes obs and action blocks.
    pub fn q_forward(
        params: &ParamStore,
        widths: &[usize],
        net: &str,
        obs_row: &[f32],
        action: &[f64],
        task: usize,
    ) -> f64 {
        let obs = normalized(obs_row);
        let mut x = matvec(params, &format!("{net}/trunk/fc0/w_obs"), &obs);
        let za = matvec(params, &format!("{net}/trunk/fc0/w_act"), action);
        for (v, a) in x.iter_mut().zip(&za) {
            *v += a;
        }
        add_bias(params, &format!("{net}/trunk/fc0/b"), &mut x);
        relu(&mut x);
        for i in 1..widths.len() {
            let mut z = matvec(params, &format!("{net}/trunk/fc{i}/w"), &x);
            add_bias(params, &format!("{net}/trunk/fc{i}/b"), &mut z);
            relu(&mut z);
            x = z;
        }
        let z = matvec(params, &format!("{net}/head{task}/w"), &x);
        z[0] + params[&format!("{net}/head{task}/b")].data()[0] as f64
    }

    /// tanh-Gaussian sample at pre-drawn noise, mirroring the sampler's
    /// clamp into the open action interval.
    pub fn squashed_sample(mean: &[f64], log_std: &[f64], eps: &[f32]) -> (Vec<f64>, f64) {
        let mut action = Vec::with_capacity(mean.len());
        let mut log_prob = 0.0f64;
        for k in 0..mean.len() {
            let sigma = log_std[k].exp();
            // the implementation samples in f32; mirror its rounding
            let u = (mean[k] as f32 + (sigma as f32) * eps[k]) as f64;
            let a = (u.tanh() as f32).clamp(-ACTION_BOUND, ACTION_BOUND) as f64;
            action.push(a);
            let log_n = -0.5 * LN_2PI - log_std[k] - 0.5 * (eps[k] as f64) * (eps[k] as f64);
            let corr = (1.0 - a * a + TANH_EPS as f64).ln();
            log_prob += log_n - corr;
        }
        (action, log_prob)
    }

    fn obs_row(batch_obs: &RealArray, row: usize) -> &[f32] {
        &batch_obs.data()[row * VECTOR_OBS_DIM..(row + 1) * VECTOR_OBS_DIM]
    }

    /// Bellman target per row (the quantity the critics regress onto).
    pub fn q_target(
        params: &ParamStore,
        widths: &[usize],
        batch: &Batch,
        hp: &Hyperparams,
        task: usize,
        noise: &StepNoise,
    ) -> Vec<f64> {
        let b = batch.len();
        (0..b)
            .map(|i| {
                let s_next = obs_row(&batch.next_obs, i);
                let (mean, log_std) = policy_forward(params, widths, s_next, task);
                let eps = &noise.next_eps.data()[i * ACTION_DIM..(i + 1) * ACTION_DIM];
                let (a, lp) = squashed_sample(&mean, &log_std, eps);
                let q1 = q_forward(params, widths, "tq1", s_next, &a, task);
                let q2 = q_forward(params, widths, "tq2", s_next, &a, task);
                batch.rewards[i] as f64
                    + (1.0 - batch.dones[i] as f64)
                        * hp.gamma as f64
                        * (q1.min(q2) - hp.alpha as f64 * lp)
            })
            .collect()
    }

    /// Half mean squared Bellman residual for one critic.
    pub fn q_loss(
        params: &ParamStore,
        widths: &[usize],
        net: &str,
        batch: &Batch,
        targets: &[f64],
        task: usize,
    ) -> f64 {
        let b = batch.len();
        let mut acc = 0.0f64;
        for i in 0..b {
            let s = obs_row(&batch.obs, i);
            let a: Vec<f64> = batch.actions.data()[i * ACTION_DIM..(i + 1) * ACTION_DIM]
                .iter()
                .map(|v| *v as f64)
                .collect();
            let q = q_forward(params, widths, net, s, &a, task);
            let d = targets[i] - q;
            acc += d * d;
        }
        0.5 * acc / b as f64
    }

    /// Conservative penalty for one critic: per row,
    /// logsumexp over {a_data, n uniform, n policy samples} minus the
    /// dataset-action value.
    pub fn cql_penalty(
        params: &ParamStore,
        widths: &[usize],
        net: &str,
        batch: &Batch,
        hp: &Hyperparams,
        task: usize,
        noise: &StepNoise,
    ) -> f64 {
        let b = batch.len();
        let n = hp.n_cql_samples;
        let mut acc = 0.0f64;
        for i in 0..b {
            let s = obs_row(&batch.obs, i);
            let (mean, log_std) = policy_forward(params, widths, s, task);
            let mut qs = Vec::with_capacity(2 * n + 1);
            let a_data: Vec<f64> = batch.actions.data()[i * ACTION_DIM..(i + 1) * ACTION_DIM]
                .iter()
                .map(|v| *v as f64)
                .collect();
            let q_data = q_forward(params, widths, net, s, &a_data, task);
            qs.push(q_data);
            for j in 0..n {
                let u = &noise.cql_uniform.data()
                    [(i * n + j) * ACTION_DIM..(i * n + j + 1) * ACTION_DIM];
                let a: Vec<f64> = u.iter().map(|v| *v as f64).collect();
                qs.push(q_forward(params, widths, net, s, &a, task));
            }
            for j in 0..n {
                let eps = &noise.cql_policy_eps.data()
                    [(i * n + j) * ACTION_DIM..(i * n + j + 1) * ACTION_DIM];
                let (a, _) = squashed_sample(&mean, &log_std, eps);
                qs.push(q_forward(params, widths, net, s, &a, task));
            }
            let m = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + qs.iter().map(|q| (q - m).exp()).sum::<f64>().ln();
            acc += lse - q_data;
        }
        acc / b as f64
    }

    /// Entropy-regularised policy objective with reparameterized actions.
    /// The reparameterized path does not clamp the squashed action.
    pub fn policy_loss(
        params: &ParamStore,
        widths: &[usize],
        batch: &Batch,
        hp: &Hyperparams,
        task: usize,
        noise: &StepNoise,
    ) -> f64 {
        let b = batch.len();
        let mut acc = 0.0f64;
        for i in 0..b {
            let s = obs_row(&batch.obs, i);
            let (mean, log_std) = policy_forward(params, widths, s, task);
            let eps = &noise.pi_eps.data()[i * ACTION_DIM..(i + 1) * ACTION_DIM];
            let mut a = Vec::with_capacity(ACTION_DIM);
            let mut lp = 0.0f64;
            for k in 0..ACTION_DIM {
                let sigma_eps = (log_std[k].exp() as f32) * eps[k];
                let u = (mean[k] as f32 + sigma_eps) as f64;
                let ak = u.tanh() as f32 as f64;
                a.push(ak);
                lp += -0.5 * LN_2PI - log_std[k] - 0.5 * (eps[k] as f64) * (eps[k] as f64);
                lp -= (1.0 - ak * ak + TANH_EPS as f64).ln();
            }
            let q1 = q_forward(params, widths, "q1", s, &a, task);
            let q2 = q_forward(params, widths, "q2", s, &a, task);
            acc += hp.alpha as f64 * lp - q1.min(q2);
        }
        acc / b as f64
    }

    /// Negative mean log-likelihood of dataset actions.
    pub fn bc_loss(params: &ParamStore, widths: &[usize], batch: &Batch, task: usize) -> f64 {
        let b = batch.len();
        let mut acc = 0.0f64;
        for i in 0..b {
            let s = obs_row(&batch.obs, i);
            let (mean, log_std) = policy_forward(params, widths, s, task);
            for k in 0..ACTION_DIM {
                let a = batch.actions.data()[i * ACTION_DIM + k]
                    .clamp(-ACTION_BOUND, ACTION_BOUND);
                let u = (0.5 * ((1.0 + a) / (1.0 - a)).ln()) as f64;
                let z = (u - mean[k]) * (-log_std[k]).exp();
                let log_n = -0.5 * LN_2PI - log_std[k] - 0.5 * z * z;
                let corr = (1.0 - (a as f64) * (a as f64) + TANH_EPS as f64).ln();
                acc += log_n - corr;
            }
        }
        -acc / b as f64
    }

    /// Quadratic consolidation penalty.
    pub fn si_penalty(si: &SIState, params: &ParamStore) -> f64 {
        if si.task_index < 2 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for (name, imp) in &si.importance {
            let phi = &params[name];
            let reference = &si.ref_weights[name];
            for i in 0..imp.len() {
                let d = (reference.data()[i] - phi.data()[i]) as f64;
                acc += imp.data()[i] as f64 * d * d;
            }
        }
        acc
    }
}
