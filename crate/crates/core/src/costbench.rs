//! Analytic and measured inference cost.
//!
//! Convention: one MAC is one scalar multiply-accumulate inside a matrix
//! product or convolution; FLOPs = 2·MACs. Bias additions, normalization,
//! activations, softmax and pooling are not counted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::instrument;
use crate::nn::{infer, Backbone, ModelError, ModelInstance, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Documented in every serialized report.
pub const MAC_CONVENTION: &str =
    "MACs count multiply-accumulates of matrix products and convolutions; FLOPs = 2*MACs; bias, normalization, activations and pooling excluded";

/// MACs attributed to one named block of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    /// Whether a maskable site can shrink this block.
    pub maskable: bool,
}

/// Latency summary of repeated forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup: usize,
    pub reps: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub batch: usize,
    /// Encoder parameters.
    pub params: usize,
    pub head_params: usize,
    pub macs: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
    /// Serialized checkpoint size.
    pub bytes: Option<u64>,
    pub timing: Option<Timing>,
    /// Base median latency over this model's median latency.
    pub speedup: Option<f64>,
}

impl CostReport {
    pub fn wall_ms(&self) -> Option<f64> {
        self.timing.map(|t| t.median_ms)
    }
}

/// Closed-form MACs of one forward pass over `batch` examples of the spec's
/// input shape, including the head when present.
pub fn count_costs(spec: &ModelSpec, batch: usize) -> Result<CostReport, ModelError> {
    spec.validate()?;
    let b = batch as u64;
    let frames = spec.input.frames as u64;
    let feats = spec.input.features as u64;
    let mut layers = Vec::new();
    let mut push = |name: String, macs: u64, maskable: bool| layers.push(LayerCost { name, macs, maskable });
    match &spec.backbone {
        Backbone::ConvT { blocks } => {
            let mut cin = feats;
            for (i, (blk, (_, lout))) in blocks.iter().zip(spec.conv_lengths()).enumerate() {
                let out = blk.out_channels as u64;
                push(format!("conv{i}"), b * out * cin * blk.kernel as u64 * lout as u64, true);
                cin = out;
            }
        }
        Backbone::TransformerT { d_model, layers: ls } | Backbone::ConformerT { d_model, layers: ls } => {
            let d = *d_model as u64;
            let bt = b * frames;
            push("input".into(), bt * feats * d, false);
            for (i, l) in ls.iter().enumerate() {
                let (h, dh) = (l.num_heads as u64, l.d_head as u64);
                let inner = h * dh;
                let proj = 4 * bt * d * inner;
                let mix = 2 * b * h * frames * frames * dh;
                push(format!("layer{i}.attn"), proj + mix, true);
                if let Some(c) = l.conv {
                    let ch = c.channels as u64;
                    push(format!("layer{i}.conv"), 2 * bt * d * ch + bt * ch * c.kernel as u64, true);
                }
                push(format!("layer{i}.ffn"), 2 * bt * d * l.ffn_hidden as u64, true);
            }
        }
    }
    if let Some(head) = spec.head {
        let (e, hid, out) = (spec.embedding_dim() as u64, head.hidden as u64, head.outputs as u64);
        push("head".into(), b * (e * hid + hid * out), false);
    }
    let macs = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        convention: MAC_CONVENTION.into(),
        batch,
        params: spec.encoder_param_count(),
        head_params: spec.head_param_count(),
        macs,
        flops: 2 * macs,
        layers,
        bytes: None,
        timing: None,
        speedup: None,
    })
}

/// Deterministic `[batch, frames, features]` input for benchmarking.
pub fn bench_input<T: Scalar>(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, "bench-input");
    let n = batch * spec.input.frames * spec.input.features;
    let data = (0..n).map(|_| T::of(rng.gen_range(0.0..1.0))).collect();
    Tensor::new(vec![batch, spec.input.frames, spec.input.features], data).expect("shape and data agree")
}

/// Multiply-accumulates the kernels actually execute during one forward.
pub fn instrumented_macs<T: Scalar>(model: &ModelInstance<T>, input: &Tensor<T>) -> Result<u64, ModelError> {
    let (out, macs) = instrument::count_macs(|| infer(model, input, None));
    out?;
    Ok(macs)
}

/// Times `reps` forward passes after `warmup` discarded ones.
///
/// # Panics
/// If `reps < 3`.
pub fn time_forward<T: Scalar>(model: &ModelInstance<T>, input: &Tensor<T>, warmup: usize, reps: usize) -> Result<Timing, ModelError> {
    assert!(reps >= 3, "time_forward needs at least 3 repetitions");
    for _ in 0..warmup {
        std::hint::black_box(infer(model, input, None)?);
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(infer(model, std::hint::black_box(input), None)?);
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let at = |q: f64| ms[((reps - 1) as f64 * q).round() as usize];
    let median = if reps % 2 == 1 { ms[reps / 2] } else { 0.5 * (ms[reps / 2 - 1] + ms[reps / 2]) };
    Ok(Timing { warmup, reps, min_ms: ms[0], median_ms: median, p90_ms: at(0.9) })
}

/// Full report for one checkpointed model: analytic cost, size and latency.
pub fn measure<T: Scalar>(model: &ModelInstance<T>, batch: usize, warmup: usize, reps: usize) -> Result<CostReport, ModelError> {
    let mut r = count_costs(&model.spec, batch)?;
    r.bytes = Some(Checkpoint::from_model(model).encoded_len() as u64);
    let input = bench_input(&model.spec, batch, 0);
    r.timing = Some(time_forward(model, &input, warmup, reps)?);
    Ok(r)
}

/// Fills `trimmed.speedup` (and `base.speedup = 1`) from the median latencies.
pub fn compare(base: &mut CostReport, trimmed: &mut CostReport) {
    if let (Some(b), Some(t)) = (base.wall_ms(), trimmed.wall_ms()) {
        base.speedup = Some(1.0);
        trimmed.speedup = Some(b / t);
    }
}

/// `label, 344.2 Mo, 23.3 GFLOPs, 11.6 GMACs`; sizes in 10⁶ bytes.
pub fn render_row(label: &str, bytes: u64, macs: u64) -> String {
    format!("{label}, {:.1} Mo, {:.1} GFLOPs, {:.1} GMACs", bytes as f64 / 1e6, 2.0 * macs as f64 / 1e9, macs as f64 / 1e9)
}

/// CSV table with one row per `(label, report)`.
pub fn comparison_csv(rows: &[(&str, &CostReport)]) -> String {
    let mut out = String::from("model,params,bytes,size_mo,macs,flops,gflops,gmacs,median_ms,speedup\n");
    for (label, r) in rows {
        let opt = |v: Option<f64>, p: usize| v.map_or(String::new(), |x| format!("{x:.p$}"));
        out.push_str(&format!(
            "{label},{},{},{},{},{},{:.4},{:.4},{},{}\n",
            r.params,
            r.bytes.map_or(String::new(), |b| b.to_string()),
            opt(r.bytes.map(|b| b as f64 / 1e6), 4),
            r.macs,
            r.flops,
            r.flops as f64 / 1e9,
            r.macs as f64 / 1e9,
            opt(r.wall_ms(), 4),
            opt(r.speedup, 3),
        ));
    }
    out
}
