//! Continual offline reinforcement learning on desk-scale manipulation
//! tasks: SAC-CQL training from fixed datasets, synaptic-intelligence
//! consolidation across a task sequence, and forgetting / transfer metrics.
//!
//! Module map:
//! - [`array`], [`tape`], [`adam`] — dense f32 math with reverse-mode AD
//!   and the optimizer.
//! - [`nets`] — the five multi-head networks (policy, twin critics, twin
//!   targets) and tanh-Gaussian sampling.
//! - [`learner`] — one SAC-CQL gradient step with behaviour-cloning warm
//!   start and the SI-regularised actor loss.
//! - [`si`] — path-integral importance and the quadratic penalty.
//! - [`tabletop`] — the deterministic kinematic surrogate environment,
//!   scripted collection policies, and the 48x48 renderer.
//! - [`datastore`] — binary episode datasets and minibatch sampling.
//! - [`checkpoint`] — flat binary snapshots of params + optimizer + SI.
//! - [`harness`] — sequential experiment runner, evaluation, and metrics.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod datastore;
pub mod error;
pub mod harness;
pub mod learner;
pub mod nets;
pub mod rng;
pub mod si;
pub mod tabletop;
pub mod tape;

pub use array::{Grads, ParamStore, RealArray};
pub use error::{CsrlError, Result};
