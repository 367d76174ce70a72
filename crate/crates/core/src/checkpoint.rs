//! Single-file checkpoint: `TRIMLAB1`, an 8-byte little-endian header length,
//! a JSON header, then a payload of little-endian `f32` values in manifest
//! order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::MaskSite;
use crate::nn::{ModelError, ModelInstance, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::SsfModule;

pub const MAGIC: &[u8; 8] = b"TRIMLAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    frozen: bool,
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, serde_json::Value>,
}

/// Tensor sections are distinguished by name prefix: `param/`, `mask/`,
/// `ssf.scale/`, `ssf.shift/`, `adam.m/`, `adam.v/`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub frozen: bool,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &ModelInstance<T>) -> Self {
        let tensors = model.params.iter().map(|(k, v)| (format!("param/{k}"), v.cast())).collect();
        Self { spec: model.spec.clone(), frozen: model.frozen, tensors, meta: BTreeMap::new() }
    }

    pub fn with_masks<T: Scalar>(mut self, masks: &[MaskSite<T>]) -> Self {
        for m in masks {
            self.tensors.push((format!("mask/{}", m.site_id), m.logits.cast()));
        }
        self
    }

    pub fn with_ssf<T: Scalar>(mut self, ssf: &SsfModule<T>) -> Self {
        for (site, t) in &ssf.scale {
            self.tensors.push((format!("ssf.scale/{site}"), t.cast()));
        }
        for (site, t) in &ssf.shift {
            self.tensors.push((format!("ssf.shift/{site}"), t.cast()));
        }
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn section(&self, prefix: &str) -> BTreeMap<String, &Tensor<f32>> {
        let p = format!("{prefix}/");
        self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(&p).map(|k| (k.to_string(), t))).collect()
    }

    pub fn model<T: Scalar>(&self) -> Result<ModelInstance<T>, CheckpointError> {
        let params = self.section("param").into_iter().map(|(k, t)| (k, t.cast())).collect();
        Ok(ModelInstance::from_params(self.spec.clone(), params, self.frozen)?)
    }

    /// Mask logits in site order, if the checkpoint carries them.
    pub fn masks<T: Scalar>(&self) -> Result<Option<Vec<MaskSite<T>>>, CheckpointError> {
        let sec = self.section("mask");
        if sec.is_empty() {
            return Ok(None);
        }
        let mut out = Vec::new();
        for site in self.spec.sites() {
            let t = sec.get(&site.id).ok_or_else(|| CheckpointError::Manifest(format!("missing mask for {}", site.id)))?;
            if t.shape() != [site.units] {
                return Err(CheckpointError::Manifest(format!("mask {} has shape {:?}", site.id, t.shape())));
            }
            out.push(MaskSite { site_id: site.id, kind: site.kind, logits: t.cast() });
        }
        Ok(Some(out))
    }

    /// Per-site scale and shift, if the checkpoint carries them.
    pub fn ssf<T: Scalar>(&self) -> Result<Option<SsfModule<T>>, CheckpointError> {
        let (scale, shift) = (self.section("ssf.scale"), self.section("ssf.shift"));
        if scale.is_empty() && shift.is_empty() {
            return Ok(None);
        }
        let mut out = SsfModule { scale: BTreeMap::new(), shift: BTreeMap::new() };
        for site in self.spec.sites() {
            for (sec, dst) in [(&scale, &mut out.scale), (&shift, &mut out.shift)] {
                let t = sec.get(&site.id).ok_or_else(|| CheckpointError::Manifest(format!("missing ssf tensor for {}", site.id)))?;
                if t.shape() != [site.units] {
                    return Err(CheckpointError::Manifest(format!("ssf tensor for {} has shape {:?}", site.id, t.shape())));
                }
                dst.insert(site.id.clone(), t.cast());
            }
        }
        Ok(Some(out))
    }

    fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = 4 * t.len() as u64;
                let e = TensorEntry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset, length };
                offset += length;
                e
            })
            .collect();
        Header { format_version: FORMAT_VERSION, spec: self.spec.clone(), frozen: self.frozen, tensors, meta: self.meta.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        16 + header.len() + self.tensors.iter().map(|(_, t)| 4 * t.len()).sum::<usize>()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 8] = bytes.get(8..16).ok_or(CheckpointError::Truncated("header length"))?.try_into().expect("8 bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| CheckpointError::Truncated("header length"))?;
        let hend = 16usize.checked_add(hlen).ok_or(CheckpointError::Truncated("header"))?;
        let header: Header = serde_json::from_slice(bytes.get(16..hend).ok_or(CheckpointError::Truncated("header"))?)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let payload = &bytes[hend..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Manifest(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n = crate::tensor::numel(&e.shape);
            if e.offset != expected || e.length != 4 * n as u64 {
                return Err(CheckpointError::Manifest(format!("{}: offset/length disagree with manifest order", e.name)));
            }
            let start = e.offset as usize;
            let end = start + e.length as usize;
            let raw = payload.get(start..end).ok_or(CheckpointError::Truncated("payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Manifest(err.to_string()))?;
            tensors.push((e.name.clone(), t));
            expected += e.length;
        }
        if payload.len() as u64 != expected {
            return Err(CheckpointError::Manifest(format!("payload has {} bytes, manifest covers {expected}", payload.len())));
        }
        Ok(Self { spec: header.spec, frozen: header.frozen, tensors, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<u64, CheckpointError> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneConfig, BackboneKind, InputSpec};

    #[test]
    fn round_trip_is_byte_identical() {
        let spec = BackboneConfig::with_kind(BackboneKind::TransformerT).build_spec(InputSpec { frames: 30, features: 128 }, Some(4)).unwrap();
        let m = ModelInstance::<f32>::build(spec, 5).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.meta.insert("lambda".into(), serde_json::json!(0.123_456_789_012_345_6));
        let bytes = ck.to_bytes();
        assert_eq!(bytes.len(), ck.encoded_len());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model::<f32>().unwrap().params, m.params);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT00000000"), Err(CheckpointError::BadMagic)));
        let spec = BackboneConfig::with_kind(BackboneKind::ConvT).build_spec(InputSpec { frames: 30, features: 128 }, None).unwrap();
        let bytes = Checkpoint::from_model(&ModelInstance::<f32>::build(spec, 1).unwrap()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
