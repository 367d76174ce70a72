//! Bias-corrected Adam over named tensors.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }
}

/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or ±inf; nothing was changed.
    SkippedNonFinite,
}

/// Updates every parameter that has a gradient. Parameters without one are
/// left alone and their moments untouched.
pub fn adam_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<StepOutcome, TensorError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| TensorError::Invalid { op: "adam", reason: format!("no parameter {name}") })?;
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch { op: "adam", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
    }
    if let Some(name) = grads.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n) {
        log::warn!("non-finite gradient for {name}; optimizer step skipped");
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPS));
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
