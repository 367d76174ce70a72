//! Trainable binary masks and the sparsity-inducing loss.
//!
//! Each maskable site owns a logit vector `m`. The forward pass multiplies the
//! site's units by `ste_round(sigmoid(m))`; the rounding passes gradients
//! straight through, so a unit that is currently off still receives gradient
//! from the task loss and can come back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{round_half_up, sigmoid_scalar, Tape, Var};
use crate::nn::{MaskableSite, ModelError, ModelSpec, SiteKind};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Initial logit of every mask unit: gate 1, `sigmoid ≈ 0.95`.
pub const DEFAULT_INIT_LOGIT: f64 = 3.0;

#[derive(Debug, Error)]
pub enum MaskingError {
    #[error("sparsity loss needs at least one site with units")]
    NoSites,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSite<T> {
    pub site_id: String,
    pub kind: SiteKind,
    pub logits: Tensor<T>,
}

impl<T: Scalar> MaskSite<T> {
    pub fn new(site: &MaskableSite, init: T) -> Self {
        Self { site_id: site.id.clone(), kind: site.kind, logits: Tensor::full(vec![site.units], init) }
    }

    pub fn units(&self) -> usize {
        self.logits.len()
    }

    /// Materialized gates, computed exactly as the forward pass does.
    pub fn gates(&self) -> Vec<bool> {
        self.logits.data().iter().map(|&m| round_half_up(sigmoid_scalar(m)) == T::one()).collect()
    }

    pub fn active(&self) -> usize {
        self.gates().iter().filter(|&&g| g).count()
    }
}

/// One mask site per maskable site of a spec, in forward order.
pub fn init_sites<T: Scalar>(spec: &ModelSpec, init: f64) -> Vec<MaskSite<T>> {
    spec.sites().iter().map(|s| MaskSite::new(s, T::of(init))).collect()
}

/// Multiplies `features[..., units]` by the binarized gates of `logits[units]`.
pub fn gate<T: Scalar>(tape: &mut Tape<T>, logits: Var, features: Var) -> Result<Var, MaskingError> {
    let units = tape.shape(logits).to_vec();
    let fshape = tape.shape(features).to_vec();
    if units.len() != 1 || fshape.last() != units.first() {
        return Err(TensorError::ShapeMismatch { op: "gate", lhs: fshape, rhs: units }.into());
    }
    let g = binarized(tape, logits)?;
    Ok(tape.mul(features, g)?)
}

/// `ste_round(sigmoid(m))`
pub fn binarized<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var, MaskingError> {
    let s = tape.sigmoid(logits)?;
    Ok(tape.ste_round(s)?)
}

/// How the ℓ2 norm in the sparsity loss is scoped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityNorm {
    /// ‖sigmoid(m_site − t)‖₂ per site, summed over sites.
    #[default]
    PerSite,
    /// Each unit is its own block: Σ |sigmoid(m_j − t)|.
    PerUnit,
}

/// Weight of the sparsity term: fixed, or matched to the task loss on the
/// first optimization step and frozen afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Lambda {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Lambda::Auto => s.serialize_str("auto"),
            Lambda::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v.is_finite() && v >= 0.0 => Ok(Lambda::Value(v)),
            Repr::Num(v) => Err(serde::de::Error::custom(format!("lambda must be finite and >= 0, got {v}"))),
            Repr::Str(s) if s == "auto" => Ok(Lambda::Auto),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("lambda must be a number or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityConfig {
    /// Threshold shift; lower values push harder towards sparsity.
    pub t: f64,
    pub lambda: Lambda,
    pub norm: SparsityNorm,
    pub init_logit: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self { t: 0.5, lambda: Lambda::Auto, norm: SparsityNorm::PerSite, init_logit: DEFAULT_INIT_LOGIT }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.t.is_finite() {
            return Err("sparsity.t must be finite".into());
        }
        if let Lambda::Value(v) = self.lambda {
            if !(v.is_finite() && v >= 0.0) {
                return Err("sparsity.lambda must be >= 0".into());
            }
        }
        if !self.init_logit.is_finite() {
            return Err("sparsity.init_logit must be finite".into());
        }
        Ok(())
    }
}

/// `(1/N) Σ_sites ‖sigmoid(m − t)‖₂` where `N` is the total unit count.
pub fn sparsity_loss<T: Scalar>(tape: &mut Tape<T>, logits: &[Var], t: T, norm: SparsityNorm) -> Result<Var, MaskingError> {
    let n: usize = logits.iter().map(|&v| tape.value(v).len()).sum();
    if logits.is_empty() || n == 0 {
        return Err(MaskingError::NoSites);
    }
    let mut terms = Vec::with_capacity(logits.len());
    for &m in logits {
        if tape.value(m).is_empty() {
            continue;
        }
        let shifted = tape.add_scalar(m, -t)?;
        let s = tape.sigmoid(shifted)?;
        let term = match norm {
            SparsityNorm::PerSite => {
                let sq = tape.mul(s, s)?;
                let ss = tape.sum(sq)?;
                tape.sqrt(ss)?
            }
            SparsityNorm::PerUnit => tape.sum(s)?,
        };
        terms.push(term);
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    Ok(tape.mul_scalar(total, T::one() / T::of(n as f64))?)
}

/// Resolves [`Lambda`] across steps; `Auto` latches `L_C / L_S` on first use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule<T> {
    mode: Lambda,
    resolved: Option<T>,
}

impl<T: Scalar> LambdaSchedule<T> {
    pub fn new(mode: Lambda) -> Self {
        let resolved = match mode {
            Lambda::Value(v) => Some(T::of(v)),
            Lambda::Auto => None,
        };
        Self { mode, resolved }
    }

    pub fn mode(&self) -> Lambda {
        self.mode
    }

    pub fn value(&self) -> Option<T> {
        self.resolved
    }

    pub fn resolve(&mut self, task_loss: T, sparsity_loss: T) -> Result<T, MaskingError> {
        if let Some(v) = self.resolved {
            return Ok(v);
        }
        let v = task_loss / sparsity_loss;
        if !v.is_finite() {
            return Err(MaskingError::NonFinite("auto lambda"));
        }
        self.resolved = Some(v);
        Ok(v)
    }
}

/// `L = L_C + λ·L_S`
pub fn total_objective<T: Scalar>(
    tape: &mut Tape<T>,
    task_loss: Var,
    sparsity: Var,
    lambda: &mut LambdaSchedule<T>,
) -> Result<(Var, T), MaskingError> {
    let lc = tape.value(task_loss).item().ok_or(TensorError::NotScalar(tape.shape(task_loss).to_vec()))?;
    let ls = tape.value(sparsity).item().ok_or(TensorError::NotScalar(tape.shape(sparsity).to_vec()))?;
    if !lc.is_finite() {
        return Err(MaskingError::NonFinite("task loss"));
    }
    if !ls.is_finite() {
        return Err(MaskingError::NonFinite("sparsity loss"));
    }
    let lam = lambda.resolve(lc, ls)?;
    let weighted = tape.mul_scalar(sparsity, lam)?;
    Ok((tape.add(task_loss, weighted)?, lam))
}

/// Materialized gates of every site.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskAssignment {
    gates: BTreeMap<String, Vec<bool>>,
}

impl MaskAssignment {
    pub fn all_ones(spec: &ModelSpec) -> Self {
        Self { gates: spec.sites().into_iter().map(|s| (s.id, vec![true; s.units])).collect() }
    }

    pub fn from_sites<T: Scalar>(sites: &[MaskSite<T>]) -> Self {
        Self { gates: sites.iter().map(|s| (s.site_id.clone(), s.gates())).collect() }
    }

    pub fn from_keep(spec: &ModelSpec, keep: &BTreeMap<String, Vec<usize>>) -> Result<Self, ModelError> {
        let mut m = Self::default();
        for site in spec.sites() {
            let mut g = vec![false; site.units];
            for &i in keep.get(&site.id).ok_or_else(|| ModelError::SiteMismatch(format!("no keep list for {}", site.id)))? {
                *g.get_mut(i).ok_or_else(|| ModelError::SiteMismatch(format!("keep index {i} out of range for {}", site.id)))? = true;
            }
            m.gates.insert(site.id, g);
        }
        Ok(m)
    }

    pub fn set(&mut self, site: &str, gates: Vec<bool>) {
        self.gates.insert(site.to_string(), gates);
    }

    pub fn get(&self, site: &str) -> Option<&[bool]> {
        self.gates.get(site).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<bool>)> {
        self.gates.iter()
    }

    pub fn keep_indices(&self, site: &str) -> Option<Vec<usize>> {
        self.gates.get(site).map(|g| g.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| i).collect())
    }

    /// Every site of `spec` is covered with a vector of matching length.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        let sites = spec.sites();
        for s in &sites {
            match self.gates.get(&s.id) {
                None => return Err(ModelError::SiteMismatch(format!("no mask for site {}", s.id))),
                Some(g) if g.len() != s.units => {
                    return Err(ModelError::SiteMismatch(format!("site {} has {} units, mask has {}", s.id, s.units, g.len())))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.gates.keys().find(|k| !sites.iter().any(|s| &s.id == *k)) {
            return Err(ModelError::SiteMismatch(format!("mask for unknown site {extra}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site_id: String,
    pub units: usize,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub sites: Vec<SiteStats>,
    pub active_units: usize,
    pub total_units: usize,
    pub active_fraction: f64,
    /// Fraction of encoder parameters the assignment would remove.
    pub trim_ratio: f64,
}

pub fn mask_statistics(spec: &ModelSpec, masks: &MaskAssignment) -> Result<MaskStats, ModelError> {
    masks.check_against(spec)?;
    let sites: Vec<SiteStats> = spec
        .sites()
        .into_iter()
        .map(|s| {
            let active = masks.get(&s.id).map_or(0, |g| g.iter().filter(|&&on| on).count());
            SiteStats { site_id: s.id, units: s.units, active }
        })
        .collect();
    let active_units: usize = sites.iter().map(|s| s.active).sum();
    let total_units: usize = sites.iter().map(|s| s.units).sum();
    let trim_ratio = crate::trimming::trim_ratio(spec, masks)?;
    Ok(MaskStats {
        active_fraction: if total_units == 0 { 1.0 } else { active_units as f64 / total_units as f64 },
        sites,
        active_units,
        total_units,
        trim_ratio,
    })
}
