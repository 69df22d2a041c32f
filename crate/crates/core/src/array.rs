//! Dense row-major f32 arrays: the storage type for activations,
//! parameters, and gradients.
//!
//! All math runs at 32-bit precision; full reductions accumulate in f64
//! before rounding back, which keeps scalar losses stable without changing
//! the storage contract.

use crate::error::{CsrlError, Result};
use std::collections::BTreeMap;

/// Dense array of 32-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl RealArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        RealArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        RealArray {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        RealArray {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not cover {} elements",
            shape,
            data.len()
        );
        RealArray {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a one-element array.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CsrlError::NonFinite {
                op: context.to_string(),
                node: 0,
            })
        }
    }

    /// Reinterprets the array under a new shape covering the same elements.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }
}

/// Named parameter (or gradient) arrays. BTreeMap keeps iteration order
/// lexicographic, which makes checkpoints and update sweeps deterministic.
pub type ParamStore = BTreeMap<String, RealArray>;

/// Gradients keyed the same way as [`ParamStore`].
pub type Grads = BTreeMap<String, RealArray>;

/// Elementwise a += scale * b over same-length slices.
pub fn axpy(a: &mut [f32], scale: f32, b: &[f32]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

/// Squared L2 norm with f64 accumulation.
pub fn sq_norm(a: &[f32]) -> f64 {
    a.iter().map(|v| (*v as f64) * (*v as f64)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_holds() {
        let a = RealArray::zeros(&[3, 4]);
        assert_eq!(a.len(), 12);
        assert_eq!(a.shape(), &[3, 4]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut a = RealArray::zeros(&[2]);
        assert!(a.all_finite());
        a.data_mut()[1] = f32::NAN;
        assert!(!a.all_finite());
        assert!(a.check_finite("test").is_err());
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_shape() {
        let _ = RealArray::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }
}
