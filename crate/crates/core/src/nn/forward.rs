//! Forward passes of the three backbones and the probing head.
//!
//! Gates sit where removing a unit changes no surviving activation:
//! conv channels after their activation, attention heads on each head's
//! output before the output projection, FFN hidden units after the
//! activation between the two linears, and conformer conv channels after the
//! first pointwise conv's activation. The residual stream and normalization
//! channels are never gated.

use std::collections::{BTreeMap, HashMap};

use super::spec::{Backbone, LayerSpec, ModelSpec};
use super::{ModelError, ModelInstance};
use crate::autograd::{Tape, Var};
use crate::masking::MaskAssignment;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

/// Parameter variables of one model recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// What happens to a site's units during the forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Modulation {
    /// Multiply each unit by a `{0, 1}` gate (`[units]`).
    Gate(Var),
    /// `scale ⊙ f + shift`, both `[units]`.
    Affine { scale: Var, shift: Var },
}

/// Site id → modulation; sites without an entry pass through unchanged.
pub type SiteMods = HashMap<String, Modulation>;

fn expand<T: Scalar>(tape: &mut Tape<T>, v: Var, units: usize, group: usize, site: &str) -> Result<Var, ModelError> {
    if tape.shape(v) != [units] {
        return Err(ModelError::SiteMismatch(format!("site {site} has {units} units, modulation has shape {:?}", tape.shape(v))));
    }
    if group == 1 {
        return Ok(v);
    }
    let idx: Vec<usize> = (0..units).flat_map(|u| std::iter::repeat(u).take(group)).collect();
    Ok(tape.index_select(v, 0, &idx)?)
}

/// Applies the site's modulation to `x[..., units * group]`.
fn modulate<T: Scalar>(
    tape: &mut Tape<T>,
    mods: &SiteMods,
    site: &str,
    x: Var,
    units: usize,
    group: usize,
) -> Result<Var, ModelError> {
    match mods.get(site) {
        None => Ok(x),
        Some(Modulation::Gate(g)) => {
            let g = expand(tape, *g, units, group, site)?;
            Ok(tape.mul(x, g)?)
        }
        Some(Modulation::Affine { scale, shift }) => {
            let s = expand(tape, *scale, units, group, site)?;
            let b = expand(tape, *shift, units, group, site)?;
            let y = tape.mul(x, s)?;
            Ok(tape.add(y, b)?)
        }
    }
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let g = p.get(&format!("{name}.gamma"))?;
    let b = p.get(&format!("{name}.beta"))?;
    Ok(tape.layer_norm(x, g, b, T::of(LN_EPS))?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(tape.linear(x, w, Some(b))?)
}

/// `[B, T, H·dh]` → `[B·H, T, dh]`
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, b: usize, t: usize, h: usize, dh: usize) -> Result<Var, ModelError> {
    let x = tape.reshape(x, &[b, t, h, dh])?;
    let x = tape.transpose(x, 1, 2)?;
    Ok(tape.reshape(x, &[b * h, t, dh])?)
}

fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    layer: &LayerSpec,
    mods: &SiteMods,
) -> Result<Var, ModelError> {
    let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
    let (h, dh) = (layer.num_heads, layer.d_head);
    let q = linear(tape, p, &format!("{prefix}.attn.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.attn.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.attn.v"), x)?;
    let q = split_heads(tape, q, b, t, h, dh)?;
    let k = split_heads(tape, k, b, t, h, dh)?;
    let v = split_heads(tape, v, b, t, h, dh)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.mul_scalar(scores, T::one() / T::of(dh as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let o = tape.bmm(attn, v, false)?;
    let o = tape.reshape(o, &[b, h, t, dh])?;
    let o = tape.transpose(o, 1, 2)?;
    let o = tape.reshape(o, &[b, t, h * dh])?;
    let o = modulate(tape, mods, &format!("{prefix}.attn.heads"), o, h, dh)?;
    linear(tape, p, &format!("{prefix}.attn.out"), o)
}

fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    layer: &LayerSpec,
    mods: &SiteMods,
) -> Result<Var, ModelError> {
    let h = linear(tape, p, &format!("{prefix}.ffn.fc1"), x)?;
    let h = tape.gelu(h)?;
    let h = modulate(tape, mods, &format!("{prefix}.ffn.hidden"), h, layer.ffn_hidden, 1)?;
    linear(tape, p, &format!("{prefix}.ffn.fc2"), h)
}

/// pointwise → GELU → gate → depthwise (bias-free) → GELU → pointwise.
///
/// The depthwise conv carries no bias so a gated channel stays exactly zero
/// until the second pointwise projection.
fn conv_module<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    channels: usize,
    kernel: usize,
    mods: &SiteMods,
) -> Result<Var, ModelError> {
    let h = linear(tape, p, &format!("{prefix}.conv.pw1"), x)?;
    let h = tape.gelu(h)?;
    let h = modulate(tape, mods, &format!("{prefix}.conv.channels"), h, channels, 1)?;
    let dw = p.get(&format!("{prefix}.conv.dw.weight"))?;
    let h = tape.depthwise_conv1d(h, dw, kernel / 2)?;
    let h = tape.gelu(h)?;
    linear(tape, p, &format!("{prefix}.conv.pw2"), h)
}

/// Per-frame encoder states: `[B, L, C]` for conv_t, `[B, T, d_model]` otherwise.
pub fn forward_encoder_states<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    p: &Bound,
    x: Var,
    mods: &SiteMods,
) -> Result<Var, ModelError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != spec.input.frames || shape[2] != spec.input.features {
        return Err(TensorError::ShapeMismatch {
            op: "forward_encoder",
            lhs: shape,
            rhs: vec![0, spec.input.frames, spec.input.features],
        }
        .into());
    }
    match &spec.backbone {
        Backbone::ConvT { blocks } => {
            let mut h = x;
            for (i, b) in blocks.iter().enumerate() {
                let w = p.get(&format!("conv{i}.weight"))?;
                let bias = p.get(&format!("conv{i}.bias"))?;
                h = tape.conv1d(h, w, Some(bias), b.stride, b.padding)?;
                h = tape.relu(h)?;
                h = modulate(tape, mods, &format!("conv{i}.channels"), h, b.out_channels, 1)?;
            }
            Ok(h)
        }
        Backbone::TransformerT { layers, .. } | Backbone::ConformerT { layers, .. } => {
            let mut h = linear(tape, p, "input", x)?;
            for (i, layer) in layers.iter().enumerate() {
                let prefix = format!("layer{i}");
                let a = layer_norm(tape, p, &format!("{prefix}.attn_norm"), h)?;
                let a = attention(tape, p, &prefix, a, layer, mods)?;
                h = tape.add(h, a)?;
                if let Some(c) = layer.conv {
                    let cv = layer_norm(tape, p, &format!("{prefix}.conv_norm"), h)?;
                    let cv = conv_module(tape, p, &prefix, cv, c.channels, c.kernel, mods)?;
                    h = tape.add(h, cv)?;
                }
                let f = layer_norm(tape, p, &format!("{prefix}.ffn_norm"), h)?;
                let f = feed_forward(tape, p, &prefix, f, layer, mods)?;
                h = tape.add(h, f)?;
            }
            layer_norm(tape, p, "final_norm", h)
        }
    }
}

/// Time-pooled embedding `[B, embedding_dim]`.
pub fn forward_encoder<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    p: &Bound,
    x: Var,
    mods: &SiteMods,
) -> Result<Var, ModelError> {
    let states = forward_encoder_states(tape, spec, p, x, mods)?;
    Ok(tape.mean_axis(states, 1)?)
}

/// Two-layer MLP with ReLU; never masked.
pub fn forward_head<T: Scalar>(tape: &mut Tape<T>, spec: &ModelSpec, p: &Bound, emb: Var) -> Result<Var, ModelError> {
    let head = spec.head.ok_or(ModelError::MissingHead)?;
    let d = tape.shape(emb).last().copied().unwrap_or(0);
    if d != spec.embedding_dim() {
        return Err(TensorError::ShapeMismatch { op: "forward_head", lhs: tape.shape(emb).to_vec(), rhs: vec![spec.embedding_dim()] }.into());
    }
    let h = linear(tape, p, "head.fc1", emb)?;
    let h = tape.relu(h)?;
    let out = linear(tape, p, "head.fc2", h)?;
    debug_assert_eq!(tape.shape(out).last(), Some(&head.outputs));
    Ok(out)
}

/// Gradient-free forward over a batch `[B, frames, features]`, optionally
/// under a fixed mask assignment. Returns the embedding and, when the model
/// has a head, the logits.
pub fn infer<T: Scalar>(
    model: &ModelInstance<T>,
    features: &Tensor<T>,
    masks: Option<&MaskAssignment>,
) -> Result<(Tensor<T>, Option<Tensor<T>>), ModelError> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let mut mods = SiteMods::new();
    if let Some(m) = masks {
        m.check_against(&model.spec)?;
        for (site, gates) in m.iter() {
            let g = tape.constant(Tensor::vector(gates.iter().map(|&on| if on { T::one() } else { T::zero() }).collect()));
            mods.insert(site.clone(), Modulation::Gate(g));
        }
    }
    let x = tape.constant(features.clone());
    let emb = forward_encoder(&mut tape, &model.spec, &p, x, &mods)?;
    let logits = match model.spec.head {
        Some(_) => Some(forward_head(&mut tape, &model.spec, &p, emb)?),
        None => None,
    };
    Ok((tape.value(emb).clone(), logits.map(|l| tape.value(l).clone())))
}
