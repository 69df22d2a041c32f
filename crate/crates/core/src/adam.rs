//! Bias-corrected Adam over named parameter stores.

use crate::array::{Grads, ParamStore, RealArray};
use crate::error::{CsrlError, Result};
use std::collections::BTreeMap;

/// Optimizer state: one first/second moment array per parameter plus a
/// shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: BTreeMap<String, RealArray>,
    pub v: BTreeMap<String, RealArray>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        assert!(lr >= 0.0, "learning rate must be nonnegative");
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update. Every named gradient must match its parameter's shape;
/// parameters without a gradient entry are left untouched. Moments are
/// lazily initialized to zero. With `lr == 0` the update is the identity
/// on params (moments still advance).
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - (state.beta1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (state.beta2 as f64).powi(state.t as i32);

    for (name, g) in grads {
        let p = params.get_mut(name).ok_or_else(|| CsrlError::ShapeMismatch {
            context: format!("adam_step: unknown parameter `{}`", name),
            expected: vec![],
            got: g.shape().to_vec(),
        })?;
        if p.shape() != g.shape() {
            return Err(CsrlError::ShapeMismatch {
                context: format!("adam_step `{}`", name),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| RealArray::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| RealArray::zeros(g.shape()));

        let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1 as f32;
            let v_hat = *vv / bc2 as f32;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = vals.len();
        s.insert(name.into(), RealArray::from_vec(&[n], vals));
        s
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = store_with("p", vec![0.5, -0.25]);
        let mut grads = Grads::new();
        grads.insert("p".into(), RealArray::zeros(&[2]));
        let mut st = AdamState::new(1e-3);
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params["p"].data(), &[0.5, -0.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // p=0, g=1, lr=1e-3: bias correction gives m_hat = v_hat = 1,
        // so the update is -lr / (1 + eps).
        let mut params = store_with("p", vec![0.0]);
        let mut grads = Grads::new();
        grads.insert("p".into(), RealArray::from_vec(&[1], vec![1.0]));
        let mut st = AdamState::new(1e-3);
        adam_step(&mut params, &grads, &mut st).unwrap();
        let expected = -1e-3f32 / (1.0 + 1e-8);
        assert!((params["p"].data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        // Hand-rolled scalar Adam with constant gradient 1.
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2u32 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }

        let mut params = store_with("p", vec![0.0]);
        let mut grads = Grads::new();
        grads.insert("p".into(), RealArray::from_vec(&[1], vec![1.0]));
        let mut st = AdamState::new(1e-3);
        adam_step(&mut params, &grads, &mut st).unwrap();
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert!(
            (params["p"].data()[0] as f64 - p).abs() < 1e-7,
            "got {} expected {}",
            params["p"].data()[0],
            p
        );
    }

    #[test]
    fn lr_zero_is_identity_on_params() {
        let mut params = store_with("p", vec![1.0, 2.0, 3.0]);
        let mut grads = Grads::new();
        grads.insert("p".into(), RealArray::from_vec(&[3], vec![0.3, -0.8, 10.0]));
        let mut st = AdamState::new(0.0);
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params["p"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = store_with("p", vec![1.0, 2.0]);
        let mut grads = Grads::new();
        grads.insert("p".into(), RealArray::zeros(&[3]));
        let mut st = AdamState::new(1e-3);
        assert!(adam_step(&mut params, &grads, &mut st).is_err());
    }
}
