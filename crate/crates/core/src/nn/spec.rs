//! Architecture descriptions and the maskable-site taxonomy.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ConvT,
    TransformerT,
    ConformerT,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ConvT => "conv_t",
            Self::TransformerT => "transformer_t",
            Self::ConformerT => "conformer_t",
        }
    }
}

/// Removable structural unit gated by one mask site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    LinearColumns,
    ConvChannels,
    AttentionHeads,
    FfnHidden,
}

/// A position where a vector of removable units can be gated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskableSite {
    pub id: String,
    pub kind: SiteKind,
    pub units: usize,
    /// Index of the conv block or transformer layer that owns the site.
    pub block: usize,
}

/// Spectrogram shape of one example: `frames × features`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub frames: usize,
    pub features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Depthwise-separable convolution sub-block of a conformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvModuleSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub num_heads: usize,
    pub d_head: usize,
    pub ffn_hidden: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvModuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    ConvT { blocks: Vec<ConvBlockSpec> },
    TransformerT { d_model: usize, layers: Vec<LayerSpec> },
    ConformerT { d_model: usize, layers: Vec<LayerSpec> },
}

/// Two-layer MLP probing head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub backbone: Backbone,
    #[serde(default)]
    pub head: Option<HeadSpec>,
}

/// Hyperparameters from which the three toy backbones are built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub conformer_channels: usize,
    pub conformer_kernel: usize,
    /// Hidden width of the probing head; 1024 reproduces the original setup.
    pub head_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::ConformerT,
            conv_channels: vec![32, 64, 64, 128],
            conv_kernel: 3,
            conv_stride: 2,
            d_model: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_hidden: 128,
            conformer_channels: 64,
            conformer_kernel: 7,
            head_hidden: 256,
        }
    }
}

impl BackboneConfig {
    pub fn with_kind(kind: BackboneKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn build_spec(&self, input: InputSpec, outputs: Option<usize>) -> Result<ModelSpec, ModelError> {
        let backbone = match self.kind {
            BackboneKind::ConvT => Backbone::ConvT {
                blocks: self
                    .conv_channels
                    .iter()
                    .map(|&c| ConvBlockSpec { out_channels: c, kernel: self.conv_kernel, stride: self.conv_stride, padding: self.conv_kernel / 2 })
                    .collect(),
            },
            BackboneKind::TransformerT | BackboneKind::ConformerT => {
                if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
                    return Err(ModelError::InvalidSpec(format!(
                        "d_model {} is not divisible by num_heads {}",
                        self.d_model, self.num_heads
                    )));
                }
                let conv = (self.kind == BackboneKind::ConformerT)
                    .then_some(ConvModuleSpec { channels: self.conformer_channels, kernel: self.conformer_kernel });
                let layer = LayerSpec { num_heads: self.num_heads, d_head: self.d_model / self.num_heads, ffn_hidden: self.ffn_hidden, conv };
                let layers = vec![layer; self.num_layers];
                if self.kind == BackboneKind::ConformerT {
                    Backbone::ConformerT { d_model: self.d_model, layers }
                } else {
                    Backbone::TransformerT { d_model: self.d_model, layers }
                }
            }
        };
        let spec = ModelSpec { input, backbone, head: outputs.map(|o| HeadSpec { hidden: self.head_hidden, outputs: o }) };
        spec.validate()?;
        Ok(spec)
    }
}

fn conv_out_len(len: usize, b: &ConvBlockSpec) -> usize {
    (len + 2 * b.padding).saturating_sub(b.kernel) / b.stride + 1
}

impl ModelSpec {
    pub fn kind(&self) -> BackboneKind {
        match self.backbone {
            Backbone::ConvT { .. } => BackboneKind::ConvT,
            Backbone::TransformerT { .. } => BackboneKind::TransformerT,
            Backbone::ConformerT { .. } => BackboneKind::ConformerT,
        }
    }

    /// Checks that hyperparameters are positive and mutually consistent.
    /// Gated widths (channels, heads, hidden units) may be zero after surgery.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.input.frames == 0 || self.input.features == 0 {
            return bad("input frames and features must be positive".into());
        }
        match &self.backbone {
            Backbone::ConvT { blocks } => {
                if blocks.is_empty() {
                    return bad("conv_t needs at least one block".into());
                }
                let mut len = self.input.frames;
                for (i, b) in blocks.iter().enumerate() {
                    if b.kernel == 0 || b.stride == 0 {
                        return bad(format!("conv block {i}: kernel and stride must be positive"));
                    }
                    if len + 2 * b.padding < b.kernel {
                        return bad(format!("conv block {i}: input length {len} too short for kernel {}", b.kernel));
                    }
                    len = conv_out_len(len, b);
                }
            }
            Backbone::TransformerT { d_model, layers } | Backbone::ConformerT { d_model, layers } => {
                let conformer = self.kind() == BackboneKind::ConformerT;
                if *d_model == 0 || layers.is_empty() {
                    return bad("d_model and layer count must be positive".into());
                }
                for (i, l) in layers.iter().enumerate() {
                    if l.d_head == 0 {
                        return bad(format!("layer {i}: d_head must be positive"));
                    }
                    match (conformer, l.conv) {
                        (true, None) => return bad(format!("layer {i}: conformer layers need a conv module")),
                        (false, Some(_)) => return bad(format!("layer {i}: transformer layers take no conv module")),
                        (true, Some(c)) if c.kernel == 0 || c.kernel % 2 == 0 => {
                            return bad(format!("layer {i}: conv kernel must be odd"))
                        }
                        _ => {}
                    }
                }
            }
        }
        if let Some(h) = self.head {
            if h.hidden == 0 || h.outputs == 0 {
                return bad("head hidden width and outputs must be positive".into());
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        match &self.backbone {
            Backbone::ConvT { blocks } => blocks.last().map_or(0, |b| b.out_channels),
            Backbone::TransformerT { d_model, .. } | Backbone::ConformerT { d_model, .. } => *d_model,
        }
    }

    /// Time steps of the per-frame encoder states.
    pub fn state_frames(&self) -> usize {
        match &self.backbone {
            Backbone::ConvT { blocks } => blocks.iter().fold(self.input.frames, conv_out_len),
            _ => self.input.frames,
        }
    }

    /// Lengths seen by each conv block: `(input_len, output_len)`.
    pub fn conv_lengths(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let Backbone::ConvT { blocks } = &self.backbone {
            let mut len = self.input.frames;
            for b in blocks {
                let next = conv_out_len(len, b);
                out.push((len, next));
                len = next;
            }
        }
        out
    }

    /// Maskable sites in forward order.
    pub fn sites(&self) -> Vec<MaskableSite> {
        let mut sites = Vec::new();
        match &self.backbone {
            Backbone::ConvT { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    sites.push(MaskableSite { id: format!("conv{i}.channels"), kind: SiteKind::ConvChannels, units: b.out_channels, block: i });
                }
            }
            Backbone::TransformerT { layers, .. } | Backbone::ConformerT { layers, .. } => {
                for (i, l) in layers.iter().enumerate() {
                    sites.push(MaskableSite { id: format!("layer{i}.attn.heads"), kind: SiteKind::AttentionHeads, units: l.num_heads, block: i });
                    if let Some(c) = l.conv {
                        sites.push(MaskableSite { id: format!("layer{i}.conv.channels"), kind: SiteKind::ConvChannels, units: c.channels, block: i });
                    }
                    sites.push(MaskableSite { id: format!("layer{i}.ffn.hidden"), kind: SiteKind::FfnHidden, units: l.ffn_hidden, block: i });
                }
            }
        }
        sites
    }

    pub fn total_units(&self) -> usize {
        self.sites().iter().map(|s| s.units).sum()
    }

    /// Encoder parameter names and shapes, in a fixed order.
    pub fn encoder_param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::ConvT { blocks } => {
                let mut cin = self.input.features;
                for (i, b) in blocks.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![b.out_channels, cin, b.kernel]));
                    out.push((format!("conv{i}.bias"), vec![b.out_channels]));
                    cin = b.out_channels;
                }
            }
            Backbone::TransformerT { d_model, layers } | Backbone::ConformerT { d_model, layers } => {
                let d = *d_model;
                out.push(("input.weight".into(), vec![d, self.input.features]));
                out.push(("input.bias".into(), vec![d]));
                for (i, l) in layers.iter().enumerate() {
                    let p = format!("layer{i}");
                    let inner = l.num_heads * l.d_head;
                    out.push((format!("{p}.attn_norm.gamma"), vec![d]));
                    out.push((format!("{p}.attn_norm.beta"), vec![d]));
                    for proj in ["q", "k", "v"] {
                        out.push((format!("{p}.attn.{proj}.weight"), vec![inner, d]));
                        out.push((format!("{p}.attn.{proj}.bias"), vec![inner]));
                    }
                    out.push((format!("{p}.attn.out.weight"), vec![d, inner]));
                    out.push((format!("{p}.attn.out.bias"), vec![d]));
                    if let Some(c) = l.conv {
                        out.push((format!("{p}.conv_norm.gamma"), vec![d]));
                        out.push((format!("{p}.conv_norm.beta"), vec![d]));
                        out.push((format!("{p}.conv.pw1.weight"), vec![c.channels, d]));
                        out.push((format!("{p}.conv.pw1.bias"), vec![c.channels]));
                        out.push((format!("{p}.conv.dw.weight"), vec![c.channels, c.kernel]));
                        out.push((format!("{p}.conv.pw2.weight"), vec![d, c.channels]));
                        out.push((format!("{p}.conv.pw2.bias"), vec![d]));
                    }
                    out.push((format!("{p}.ffn_norm.gamma"), vec![d]));
                    out.push((format!("{p}.ffn_norm.beta"), vec![d]));
                    out.push((format!("{p}.ffn.fc1.weight"), vec![l.ffn_hidden, d]));
                    out.push((format!("{p}.ffn.fc1.bias"), vec![l.ffn_hidden]));
                    out.push((format!("{p}.ffn.fc2.weight"), vec![d, l.ffn_hidden]));
                    out.push((format!("{p}.ffn.fc2.bias"), vec![d]));
                }
                out.push(("final_norm.gamma".into(), vec![d]));
                out.push(("final_norm.beta".into(), vec![d]));
            }
        }
        out
    }

    pub fn head_param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self.head {
            None => Vec::new(),
            Some(h) => vec![
                ("head.fc1.weight".into(), vec![h.hidden, self.embedding_dim()]),
                ("head.fc1.bias".into(), vec![h.hidden]),
                ("head.fc2.weight".into(), vec![h.outputs, h.hidden]),
                ("head.fc2.bias".into(), vec![h.outputs]),
            ],
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut all = self.encoder_param_shapes();
        all.extend(self.head_param_shapes());
        all
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head_param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> InputSpec {
        InputSpec { frames: 30, features: 128 }
    }

    #[test]
    fn default_site_counts() {
        let conv = BackboneConfig::with_kind(BackboneKind::ConvT).build_spec(input(), Some(10)).unwrap();
        let units: Vec<usize> = conv.sites().iter().map(|s| s.units).collect();
        assert_eq!(units, vec![32, 64, 64, 128]);

        let tr = BackboneConfig::with_kind(BackboneKind::TransformerT).build_spec(input(), Some(10)).unwrap();
        assert_eq!(tr.sites().len(), 8);
        assert_eq!(tr.total_units(), 4 * (4 + 128));

        let cf = BackboneConfig::with_kind(BackboneKind::ConformerT).build_spec(input(), Some(10)).unwrap();
        assert_eq!(cf.sites().len(), 12);
    }

    #[test]
    fn conv_t_lengths_and_params() {
        let conv = BackboneConfig::with_kind(BackboneKind::ConvT).build_spec(input(), None).unwrap();
        let lens: Vec<usize> = conv.conv_lengths().iter().map(|l| l.1).collect();
        assert_eq!(lens, vec![15, 8, 4, 2]);
        // 32·128·3+32 + 64·32·3+64 + 64·64·3+64 + 128·64·3+128
        assert_eq!(conv.encoder_param_count(), 12320 + 6208 + 12352 + 24704);
    }

    #[test]
    fn rejects_inconsistent_hyperparameters() {
        let mut cfg = BackboneConfig::with_kind(BackboneKind::TransformerT);
        cfg.num_heads = 3;
        assert!(cfg.build_spec(input(), None).is_err());
        let cfg = BackboneConfig::with_kind(BackboneKind::ConvT);
        assert!(cfg.build_spec(InputSpec { frames: 0, features: 4 }, None).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let cf = BackboneConfig::default().build_spec(input(), Some(8)).unwrap();
        let s = serde_json::to_string(&cf).unwrap();
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cf);
    }
}
