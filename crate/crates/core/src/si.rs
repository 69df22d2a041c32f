//! Synaptic Intelligence: online path-integral importance for the actor
//! parameters, consolidated into a quadratic penalty at task boundaries.
//!
//! During training, each actor update contributes -g . delta_phi to the
//! running integral omega. At a task boundary, omega is folded into the
//! consolidated importance Omega (damped by the squared parameter travel),
//! the reference weights are re-anchored, and omega resets.

use crate::array::{Grads, ParamStore, RealArray};
use crate::error::{CsrlError, Result};

#[derive(Debug, Clone)]
pub struct SIState {
    /// Running path integral for the current task, per actor parameter.
    pub omega: ParamStore,
    /// Consolidated importance, entrywise >= 0.
    pub importance: ParamStore,
    /// Reference weights: actor params at the end of the previous task.
    pub ref_weights: ParamStore,
    /// Damping added to the squared travel in the consolidation ratio.
    pub xi: f32,
    /// Current task index, 1-based.
    pub task_index: usize,
}

impl SIState {
    /// Fresh state anchored at the given actor parameters.
    pub fn new(actor_params: &ParamStore, actor_names: &[String], xi: f32) -> Self {
        assert!(xi > 0.0, "damping must be positive");
        let mut omega = ParamStore::new();
        let mut importance = ParamStore::new();
        let mut ref_weights = ParamStore::new();
        for name in actor_names {
            let p = &actor_params[name];
            omega.insert(name.clone(), RealArray::zeros(p.shape()));
            importance.insert(name.clone(), RealArray::zeros(p.shape()));
            ref_weights.insert(name.clone(), p.clone());
        }
        SIState {
            omega,
            importance,
            ref_weights,
            xi,
            task_index: 1,
        }
    }

    /// Marks the start of task `mu`: the path integral restarts at zero.
    pub fn begin_task(&mut self, mu: usize) {
        assert!(mu >= 1);
        self.task_index = mu;
        for arr in self.omega.values_mut() {
            arr.data_mut().fill(0.0);
        }
    }

    /// Path-integral update: omega_k += -g_k * delta_k for every actor
    /// parameter. `grads` holds the gradient of the total actor loss that
    /// was applied; `delta` the realized parameter change.
    pub fn accumulate(&mut self, grads: &Grads, delta: &ParamStore) -> Result<()> {
        for (name, om) in self.omega.iter_mut() {
            let d = match delta.get(name) {
                Some(d) => d,
                None => continue, // head not trained this step: no movement
            };
            let g = grads.get(name).ok_or_else(|| CsrlError::ShapeMismatch {
                context: format!("si accumulate: gradient missing for `{name}`"),
                expected: d.shape().to_vec(),
                got: vec![],
            })?;
            if g.shape() != d.shape() || g.shape() != om.shape() {
                return Err(CsrlError::ShapeMismatch {
                    context: format!("si accumulate `{name}`"),
                    expected: om.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            for ((o, gv), dv) in om.data_mut().iter_mut().zip(g.data()).zip(d.data()) {
                *o += -gv * dv;
            }
        }
        Ok(())
    }

    /// End-of-task consolidation:
    ///   Omega_k += max(0, omega_k) / ((phi_end_k - ref_k)^2 + xi)
    /// then re-anchors the reference weights, clears omega, and advances
    /// the task index. Calling it twice in a row adds zero the second time.
    pub fn consolidate(&mut self, actor_end: &ParamStore) {
        for (name, imp) in self.importance.iter_mut() {
            let end = &actor_end[name];
            let reference = &self.ref_weights[name];
            let om = &self.omega[name];
            for i in 0..imp.len() {
                let travel = end.data()[i] - reference.data()[i];
                let gain = om.data()[i].max(0.0) / (travel * travel + self.xi);
                imp.data_mut()[i] += gain;
            }
        }
        for (name, reference) in self.ref_weights.iter_mut() {
            *reference = actor_end[name].clone();
        }
        for arr in self.omega.values_mut() {
            arr.data_mut().fill(0.0);
        }
        self.task_index += 1;
    }

    /// Quadratic surrogate loss and its gradient at the given actor params:
    ///   L = sum_k Omega_k (ref_k - phi_k)^2,  dL/dphi_k = 2 Omega_k (phi_k - ref_k).
    /// On the first task this is exactly zero by contract.
    pub fn penalty(&self, actor_params: &ParamStore) -> (f64, Grads) {
        let mut grads = Grads::new();
        if self.task_index < 2 {
            for (name, arr) in &self.omega {
                grads.insert(name.clone(), RealArray::zeros(arr.shape()));
            }
            return (0.0, grads);
        }
        let mut loss = 0.0f64;
        for (name, imp) in &self.importance {
            let phi = &actor_params[name];
            let reference = &self.ref_weights[name];
            let mut g = RealArray::zeros(imp.shape());
            for i in 0..imp.len() {
                let diff = phi.data()[i] - reference.data()[i];
                loss += imp.data()[i] as f64 * (diff as f64) * (diff as f64);
                g.data_mut()[i] = 2.0 * imp.data()[i] * diff;
            }
            grads.insert(name.clone(), g);
        }
        (loss, grads)
    }
}
