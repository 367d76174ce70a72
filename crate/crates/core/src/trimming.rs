//! Structural surgery: removes masked units and checks the result against the
//! masked model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::masking::MaskAssignment;
use crate::nn::{infer, Backbone, ModelError, ModelInstance, ModelSpec, SiteKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keep `indices` along `axis` of parameter `param`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceDirective {
    pub param: String,
    pub axis: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimPlan {
    /// Surviving unit indices per site, strictly increasing.
    pub keep: BTreeMap<String, Vec<usize>>,
    pub directives: Vec<SliceDirective>,
    pub spec_before: ModelSpec,
    pub spec_after: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRemoval {
    pub site_id: String,
    pub units_before: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    /// Encoder parameters only; the head is not part of the ratio.
    pub params_before: usize,
    pub params_after: usize,
    pub head_params: usize,
    pub trimming_ratio: f64,
    pub sites: Vec<SiteRemoval>,
    pub bytes_before: u64,
    pub bytes_after: u64,
    /// Max |masked − trimmed| over the probe set, when verification ran.
    pub max_abs_deviation: Option<f64>,
    pub dead_sites: Vec<String>,
}

/// Group of `group` consecutive rows per unit.
fn grouped(keep: &[usize], group: usize) -> Vec<usize> {
    keep.iter().flat_map(|&u| u * group..(u + 1) * group).collect()
}

fn check_keep(site: &str, keep: &[usize], units: usize) -> Result<(), ModelError> {
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::SiteMismatch(format!("keep indices for {site} are not strictly increasing")));
    }
    if let Some(&i) = keep.iter().find(|&&i| i >= units) {
        return Err(ModelError::SiteMismatch(format!("keep index {i} out of range for {site} ({units} units)")));
    }
    Ok(())
}

/// Spec with each site narrowed to `counts[site]` units (missing sites keep
/// their width).
pub fn narrowed_spec(spec: &ModelSpec, counts: &BTreeMap<String, usize>) -> ModelSpec {
    let mut out = spec.clone();
    let width = |id: String, cur: usize| counts.get(&id).copied().unwrap_or(cur);
    match &mut out.backbone {
        Backbone::ConvT { blocks } => {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.out_channels = width(format!("conv{i}.channels"), b.out_channels);
            }
        }
        Backbone::TransformerT { layers, .. } | Backbone::ConformerT { layers, .. } => {
            for (i, l) in layers.iter_mut().enumerate() {
                l.num_heads = width(format!("layer{i}.attn.heads"), l.num_heads);
                l.ffn_hidden = width(format!("layer{i}.ffn.hidden"), l.ffn_hidden);
                if let Some(c) = l.conv.as_mut() {
                    c.channels = width(format!("layer{i}.conv.channels"), c.channels);
                }
            }
        }
    }
    out
}

/// Fraction of encoder parameters removed by `masks`, without touching weights.
pub fn trim_ratio(spec: &ModelSpec, masks: &MaskAssignment) -> Result<f64, ModelError> {
    masks.check_against(spec)?;
    let counts = masks.iter().map(|(k, g)| (k.clone(), g.iter().filter(|&&on| on).count())).collect();
    let before = spec.encoder_param_count();
    let after = narrowed_spec(spec, &counts).encoder_param_count();
    Ok(if before == 0 { 0.0 } else { 1.0 - after as f64 / before as f64 })
}

pub fn plan_trim(spec: &ModelSpec, masks: &MaskAssignment) -> Result<TrimPlan, ModelError> {
    masks.check_against(spec)?;
    let keep = spec
        .sites()
        .into_iter()
        .map(|s| {
            let k = masks.keep_indices(&s.id).unwrap_or_default();
            (s.id, k)
        })
        .collect();
    TrimPlan::from_keep(spec, keep)
}

impl TrimPlan {
    /// Derives slicing directives from explicit keep lists.
    pub fn from_keep(spec: &ModelSpec, keep: BTreeMap<String, Vec<usize>>) -> Result<Self, ModelError> {
        let sites = spec.sites();
        for s in &sites {
            let k = keep.get(&s.id).ok_or_else(|| ModelError::SiteMismatch(format!("no keep list for {}", s.id)))?;
            check_keep(&s.id, k, s.units)?;
        }
        if let Some(extra) = keep.keys().find(|k| !sites.iter().any(|s| &s.id == *k)) {
            return Err(ModelError::SiteMismatch(format!("keep list for unknown site {extra}")));
        }
        let mut directives = Vec::new();
        let mut push = |param: String, axis: usize, indices: Vec<usize>| directives.push(SliceDirective { param, axis, indices });
        match &spec.backbone {
            Backbone::ConvT { blocks } => {
                for i in 0..blocks.len() {
                    let k = &keep[&format!("conv{i}.channels")];
                    push(format!("conv{i}.weight"), 0, k.clone());
                    push(format!("conv{i}.bias"), 0, k.clone());
                    if i + 1 < blocks.len() {
                        push(format!("conv{}.weight", i + 1), 1, k.clone());
                    } else if spec.head.is_some() {
                        push("head.fc1.weight".into(), 1, k.clone());
                    }
                }
            }
            Backbone::TransformerT { layers, .. } | Backbone::ConformerT { layers, .. } => {
                for (i, l) in layers.iter().enumerate() {
                    let p = format!("layer{i}");
                    let rows = grouped(&keep[&format!("{p}.attn.heads")], l.d_head);
                    for proj in ["q", "k", "v"] {
                        push(format!("{p}.attn.{proj}.weight"), 0, rows.clone());
                        push(format!("{p}.attn.{proj}.bias"), 0, rows.clone());
                    }
                    push(format!("{p}.attn.out.weight"), 1, rows);
                    if l.conv.is_some() {
                        let k = &keep[&format!("{p}.conv.channels")];
                        push(format!("{p}.conv.pw1.weight"), 0, k.clone());
                        push(format!("{p}.conv.pw1.bias"), 0, k.clone());
                        push(format!("{p}.conv.dw.weight"), 0, k.clone());
                        push(format!("{p}.conv.pw2.weight"), 1, k.clone());
                    }
                    let k = &keep[&format!("{p}.ffn.hidden")];
                    push(format!("{p}.ffn.fc1.weight"), 0, k.clone());
                    push(format!("{p}.ffn.fc1.bias"), 0, k.clone());
                    push(format!("{p}.ffn.fc2.weight"), 1, k.clone());
                }
            }
        }
        let counts = keep.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        let spec_after = narrowed_spec(spec, &counts);
        Ok(Self { keep, directives, spec_before: spec.clone(), spec_after })
    }

    pub fn is_identity(&self) -> bool {
        self.spec_before == self.spec_after
    }

    /// Sites whose every unit is removed.
    pub fn dead_sites(&self) -> Vec<String> {
        self.keep.iter().filter(|(_, k)| k.is_empty()).map(|(s, _)| s.clone()).collect()
    }
}

/// Copies the surviving parameters into a new, smaller model.
pub fn apply_trim<T: Scalar>(model: &ModelInstance<T>, plan: &TrimPlan) -> Result<(ModelInstance<T>, TrimReport), ModelError> {
    if model.spec != plan.spec_before {
        return Err(ModelError::SiteMismatch("trim plan was derived from a different spec".into()));
    }
    let mut params = model.params.clone();
    for d in &plan.directives {
        let t = params.get(&d.param).ok_or_else(|| ModelError::MissingParam(d.param.clone()))?;
        let sliced = t.select(d.axis, &d.indices)?;
        params.insert(d.param.clone(), sliced);
    }
    let trimmed = ModelInstance::from_params(plan.spec_after.clone(), params, model.frozen)?;

    let dead_sites = plan.dead_sites();
    for s in &dead_sites {
        if model.spec.kind() == crate::nn::BackboneKind::ConvT {
            log::warn!("site {s} lost every unit; downstream conv layers reduce to bias-driven constants");
        } else {
            log::warn!("site {s} lost every unit; its block contributes only the output bias");
        }
    }
    let sites = model
        .spec
        .sites()
        .into_iter()
        .map(|s| {
            let kept = plan.keep.get(&s.id).map_or(s.units, Vec::len);
            SiteRemoval { removed: s.units - kept, units_before: s.units, site_id: s.id }
        })
        .collect();
    let params_before = model.encoder_param_count();
    let params_after = trimmed.encoder_param_count();
    let report = TrimReport {
        params_before,
        params_after,
        head_params: trimmed.head_param_count(),
        trimming_ratio: if params_before == 0 { 0.0 } else { 1.0 - params_after as f64 / params_before as f64 },
        sites,
        bytes_before: crate::checkpoint::Checkpoint::from_model(model).encoded_len() as u64,
        bytes_after: crate::checkpoint::Checkpoint::from_model(&trimmed).encoded_len() as u64,
        max_abs_deviation: None,
        dead_sites,
    };
    Ok((trimmed, report))
}

/// Max |masked − trimmed| over `probes` (`[B, frames, features]`) at the
/// embedding and, when both models have heads, the logits. For conv_t the
/// masked embedding is restricted to the surviving last-layer channels.
pub fn verify_equivalence<T: Scalar>(
    masked: &ModelInstance<T>,
    masks: &MaskAssignment,
    trimmed: &ModelInstance<T>,
    plan: &TrimPlan,
    probes: &Tensor<T>,
) -> Result<f64, ModelError> {
    if masked.spec.input != trimmed.spec.input {
        return Err(ModelError::InvalidSpec("masked and trimmed models take different inputs".into()));
    }
    let (emb_m, logits_m) = infer(masked, probes, Some(masks))?;
    let (emb_t, logits_t) = infer(trimmed, probes, None)?;
    let emb_m = match masked.spec.sites().last() {
        Some(s) if s.kind == SiteKind::ConvChannels && masked.spec.kind() == crate::nn::BackboneKind::ConvT => {
            let keep = plan.keep.get(&s.id).ok_or_else(|| ModelError::SiteMismatch(format!("no keep list for {}", s.id)))?;
            emb_m.select(1, keep)?
        }
        _ => emb_m,
    };
    let diff = |a: &Tensor<T>, b: &Tensor<T>| {
        a.max_abs_diff(b).map(|d| d.as_f64()).ok_or_else(|| {
            ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch { op: "verify_equivalence", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
        })
    };
    let mut dev = diff(&emb_m, &emb_t)?;
    if let (Some(a), Some(b)) = (logits_m, logits_t) {
        let d = diff(&a, &b)?;
        if d.is_nan() || d > dev {
            dev = d;
        }
    }
    Ok(dev)
}
