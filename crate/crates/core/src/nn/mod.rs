//! Layers, backbones and the maskable-site taxonomy.

mod forward;
mod spec;

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub use forward::{forward_encoder, forward_encoder_states, forward_head, infer, Bound, Modulation, SiteMods};
pub use spec::{
    Backbone, BackboneConfig, BackboneKind, ConvBlockSpec, ConvModuleSpec, HeadSpec, InputSpec, LayerSpec, MaskableSite,
    ModelSpec, SiteKind,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("mask/site mismatch: {0}")]
    SiteMismatch(String),
    #[error("model has no head")]
    MissingHead,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameters bound to a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance<T> {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor<T>>,
    /// Set once the encoder has been pretrained; frozen encoders are never
    /// updated by downstream training.
    pub frozen: bool,
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

pub(crate) fn init_tensor<T: Scalar>(name: &str, shape: &[usize], seed: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if name.ends_with(".bias") || name.ends_with(".beta") {
        return Tensor::zeros(shape.to_vec());
    }
    if name.ends_with(".gamma") {
        return Tensor::ones(shape.to_vec());
    }
    // Kaiming-uniform: weights are [out, in, ...], fan-in is everything past the first axis.
    let fan_in: usize = shape[1..].iter().product();
    let bound = if fan_in == 0 { 0.0 } else { (6.0 / fan_in as f64).sqrt() };
    let mut rng = crate::rng::stream(seed, name);
    let data = (0..n).map(|_| T::of(rng.gen_range(-1.0..=1.0) * bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl<T: Scalar> ModelInstance<T> {
    /// Deterministic initialization; each parameter draws from its own
    /// `(seed, name)` stream so architectures with equal names share values.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, seed);
                (name, t)
            })
            .collect();
        Ok(Self { spec, params, frozen: false })
    }

    /// Wraps existing parameters after checking them against the spec.
    pub fn from_params(spec: ModelSpec, params: BTreeMap<String, Tensor<T>>, frozen: bool) -> Result<Self, ModelError> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        for (name, shape) in &shapes {
            let t = params.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() });
            }
        }
        if let Some(extra) = params.keys().find(|k| !shapes.iter().any(|(n, _)| n == *k)) {
            return Err(ModelError::UnexpectedParam(extra.clone()));
        }
        Ok(Self { spec, params, frozen })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| !is_head_param(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| is_head_param(n)).map(|(_, t)| t.len()).sum()
    }

    /// Replaces the head with a freshly initialized one.
    pub fn reset_head(&mut self, head: Option<HeadSpec>, seed: u64) {
        self.params.retain(|n, _| !is_head_param(n));
        self.spec.head = head;
        for (name, shape) in self.spec.head_param_shapes() {
            let t = init_tensor(&name, &shape, seed);
            self.params.insert(name, t);
        }
    }

    /// Records every parameter on `tape`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v: Var = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Bound::new(vars)
    }

    pub fn cast<U: Scalar>(&self) -> ModelInstance<U> {
        ModelInstance {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }
}
