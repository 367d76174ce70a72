use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{score, task_loss, HistoryRecord, LossKind, Mode, TaskData, Targets, TrainConfig, TrainError};
use crate::autograd::{Tape, Var};
use crate::data::{Dataset, TaskKind};
use crate::masking::{self, mask_statistics, LambdaSchedule, MaskAssignment, MaskSite, SparsityConfig};
use crate::nn::{
    forward_encoder, forward_encoder_states, forward_head, init_tensor, is_head_param, Bound, ModelError, ModelInstance,
    ModelSpec, Modulation, SiteMods,
};
use super::optim::{adam_step, AdamState};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Examples per forward pass outside of training steps.
const EVAL_CHUNK: usize = 64;

type Params<T> = BTreeMap<String, Tensor<T>>;
type Vars = BTreeMap<String, Var>;

/// Epoch-wise shuffled minibatches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "batches");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct StepOut {
    loss: Var,
    task: Var,
    sparsity: Option<(Var, f64)>,
}

struct Eval {
    metric: Option<f64>,
    active_fraction: f64,
    trim_ratio: f64,
}

struct LoopResult<T> {
    history: Vec<HistoryRecord>,
    best: Option<(usize, f64, Params<T>)>,
}

type StepFn<'a, T> = dyn FnMut(&mut Tape<T>, &Vars, &[usize]) -> Result<StepOut, TrainError> + 'a;
type EvalFn<'a, T> = dyn FnMut(&Params<T>) -> Result<Eval, TrainError> + 'a;

fn train_loop<T: Scalar>(
    cfg: &TrainConfig,
    n_train: usize,
    params: &mut Params<T>,
    step_fn: &mut StepFn<'_, T>,
    eval_fn: &mut EvalFn<'_, T>,
) -> Result<LoopResult<T>, TrainError> {
    if n_train == 0 {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let mut batcher = Batcher::new(n_train, cfg.seed);
    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Params<T>)> = None;
    for step in 1..=cfg.steps {
        let idx = batcher.next(cfg.batch_size);
        let mut tape = Tape::new();
        let vars: Vars = params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        let out = step_fn(&mut tape, &vars, &idx)?;
        let loss = tape.value(out.loss).item().map_or(f64::NAN, |v| v.as_f64());
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, what: "loss" });
        }
        let mut g = tape.backward(out.loss)?;
        let grads: Params<T> = vars.iter().filter_map(|(k, &v)| g.take(v).map(|t| (k.clone(), t))).collect();
        adam_step(params, &grads, &mut adam, T::of(cfg.lr_at(step)))?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let e = eval_fn(params)?;
            let task_loss = tape.value(out.task).item().map_or(f64::NAN, |v| v.as_f64());
            let (sparsity_loss, lambda) = match out.sparsity {
                Some((ls, lam)) => (tape.value(ls).item().map(|v| v.as_f64()), Some(lam)),
                None => (None, None),
            };
            history.push(HistoryRecord {
                step,
                loss,
                task_loss,
                sparsity_loss,
                lambda,
                metric: e.metric,
                active_fraction: e.active_fraction,
                trim_ratio: e.trim_ratio,
            });
            if let Some(m) = e.metric {
                if best.as_ref().map_or(true, |(_, b, _)| m > *b) {
                    best = Some((step, m, params.clone()));
                }
            }
        }
    }
    Ok(LoopResult { history, best })
}

fn bind_all<T: Scalar>(tape: &mut Tape<T>, fixed: &Params<T>, vars: &Vars) -> Bound {
    let mut m: BTreeMap<String, Var> = fixed.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
    for (k, &v) in vars {
        m.insert(k.clone(), v);
    }
    Bound::new(m)
}

fn targets<T: Scalar>(data: &Dataset<T>, idx: &[usize]) -> Targets<T> {
    match data.task {
        TaskKind::ChordTags => Targets::Tags(data.tag_matrix().select(0, idx).expect("indices in range")),
        _ => {
            let c = data.classes();
            Targets::Classes(idx.iter().map(|&i| c[i]).collect())
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..n.min(s + EVAL_CHUNK)).collect())
}

/// Constant per-site modulation used outside of training steps.
#[derive(Debug, Clone)]
enum ConstMod<T> {
    Gate(Tensor<T>),
    Affine(Tensor<T>, Tensor<T>),
}

fn bind_mods<T: Scalar>(tape: &mut Tape<T>, mods: &BTreeMap<String, ConstMod<T>>) -> SiteMods {
    mods.iter()
        .map(|(site, m)| {
            let v = match m {
                ConstMod::Gate(g) => Modulation::Gate(tape.constant(g.clone())),
                ConstMod::Affine(s, b) => Modulation::Affine { scale: tape.constant(s.clone()), shift: tape.constant(b.clone()) },
            };
            (site.clone(), v)
        })
        .collect()
}

/// Chunked gradient-free forward; returns embeddings `[N, D]` and, when the
/// spec has a head, logits.
fn forward_all<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    features: &Tensor<T>,
    mods: &BTreeMap<String, ConstMod<T>>,
    with_head: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>), TrainError> {
    let head = if with_head { spec.head } else { None };
    let n = features.shape()[0];
    let mut emb = Vec::new();
    let mut logits = Vec::new();
    for idx in chunks(n) {
        let mut tape = Tape::new();
        let p = bind_all(&mut tape, params, &Vars::new());
        let sm = bind_mods(&mut tape, mods);
        let x = tape.constant(features.select(0, &idx)?);
        let e = forward_encoder(&mut tape, spec, &p, x, &sm)?;
        emb.extend_from_slice(tape.value(e).data());
        if head.is_some() {
            let l = forward_head(&mut tape, spec, &p, e)?;
            logits.extend_from_slice(tape.value(l).data());
        }
    }
    let emb = Tensor::new(vec![n, spec.embedding_dim()], emb)?;
    let logits = match head {
        Some(h) => Some(Tensor::new(vec![n, h.outputs], logits)?),
        None => None,
    };
    Ok((emb, logits))
}

/// Head logits on cached embeddings, in the same chunking as [`forward_all`].
fn head_on_cached<T: Scalar>(spec: &ModelSpec, head: &Params<T>, emb: &Tensor<T>) -> Result<Tensor<T>, TrainError> {
    let n = emb.shape()[0];
    let outputs = spec.head.ok_or(ModelError::MissingHead)?.outputs;
    let mut out = Vec::with_capacity(n * outputs);
    for idx in chunks(n) {
        let mut tape = Tape::new();
        let p = bind_all(&mut tape, head, &Vars::new());
        let e = tape.constant(emb.select(0, &idx)?);
        let l = forward_head(&mut tape, spec, &p, e)?;
        out.extend_from_slice(tape.value(l).data());
    }
    Ok(Tensor::new(vec![n, outputs], out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome<T> {
    /// Encoder with updated weights, marked frozen.
    pub model: ModelInstance<T>,
    pub history: Vec<HistoryRecord>,
}

/// Masked-frame reconstruction: a fraction of input frames is zeroed, a
/// per-state linear head predicts the original frames, and the MSE is taken
/// over the hidden frames only. Encoders that downsample time predict
/// `ceil(frames / states)` frames per state.
pub fn run_pretrain<T: Scalar>(
    model: &ModelInstance<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if cfg.mode != Mode::Pretrain {
        return Err(TrainError::Config(format!("run_pretrain called with mode {:?}", cfg.mode)));
    }
    let spec = model.spec.clone();
    let (frames, feats) = (spec.input.frames, spec.input.features);
    if data.features.shape()[1..] != [frames, feats] {
        return Err(TrainError::Config(format!("data features {:?} do not match model input", &data.features.shape()[1..])));
    }
    let states = spec.state_frames();
    let up = frames.div_ceil(states);
    let dim = spec.embedding_dim();
    let mut params: Params<T> = model.params.iter().filter(|(k, _)| !is_head_param(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
    params.insert("recon.weight".into(), init_tensor("recon.weight", &[up * feats, dim], cfg.seed));
    params.insert("recon.bias".into(), init_tensor("recon.bias", &[up * feats], cfg.seed));
    let hidden = ((cfg.mask_fraction * frames as f64).round() as usize).min(frames);
    let mut mask_rng = rng::stream(cfg.seed, "pretext-mask");

    let recon_loss = |tape: &mut Tape<T>, p: &Bound, x: &Tensor<T>, mask: &Tensor<T>, count: usize| -> Result<Var, TrainError> {
        let b = x.shape()[0];
        let visible = Tensor::new(x.shape().to_vec(), x.data().iter().zip(mask.data()).map(|(&v, &m)| v * (T::one() - m)).collect())?;
        let xin = tape.constant(visible);
        let s = forward_encoder_states(tape, &spec, p, xin, &SiteMods::new())?;
        let w = p.get("recon.weight")?;
        let bias = p.get("recon.bias")?;
        let pred = tape.linear(s, w, Some(bias))?;
        let pred = tape.reshape(pred, &[b, states * up, feats])?;
        let pred = tape.slice(pred, 1, 0, frames)?;
        let target = tape.constant(x.clone());
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let m = tape.constant(mask.clone());
        let sq = tape.mul(sq, m)?;
        let total = tape.sum(sq)?;
        let scale = if count == 0 { T::zero() } else { T::one() / T::of((count * feats) as f64) };
        Ok(tape.mul_scalar(total, scale)?)
    };
    let draw_mask = |rng: &mut ChaCha8Rng, b: usize| -> (Tensor<T>, usize) {
        let mut m = vec![T::zero(); b * frames * feats];
        for e in 0..b {
            for f in rand::seq::index::sample(rng, frames, hidden) {
                let start = (e * frames + f) * feats;
                m[start..start + feats].iter_mut().for_each(|v| *v = T::one());
            }
        }
        (Tensor::new(vec![b, frames, feats], m).expect("mask size"), b * hidden)
    };

    let mut step_fn = |tape: &mut Tape<T>, vars: &Vars, idx: &[usize]| -> Result<StepOut, TrainError> {
        let p = bind_all(tape, &Params::new(), vars);
        let x = data.batch(idx);
        let (mask, count) = draw_mask(&mut mask_rng, idx.len());
        let loss = recon_loss(tape, &p, &x, &mask, count)?;
        Ok(StepOut { loss, task: loss, sparsity: None })
    };
    let mut val_rng = rng::stream(cfg.seed, "pretext-val-mask");
    let mut eval_fn = |params: &Params<T>| -> Result<Eval, TrainError> {
        // Validation loss is logged for inspection; it plays no role in selection.
        if let Some(v) = val {
            let idx: Vec<usize> = (0..v.len().min(EVAL_CHUNK)).collect();
            let mut tape = Tape::new();
            let p = bind_all(&mut tape, params, &Vars::new());
            let (mask, count) = draw_mask(&mut val_rng, idx.len());
            let l = recon_loss(&mut tape, &p, &v.batch(&idx), &mask, count)?;
            log::debug!("pretext validation loss {}", tape.value(l).data()[0]);
        }
        Ok(Eval { metric: None, active_fraction: 1.0, trim_ratio: 0.0 })
    };
    let res = train_loop(cfg, data.len(), &mut params, &mut step_fn, &mut eval_fn)?;
    let mut out = model.clone();
    for (k, v) in params {
        if !k.starts_with("recon.") {
            out.params.insert(k, v);
        }
    }
    out.frozen = true;
    Ok(PretrainOutcome { model: out, history: res.history })
}

/// Per-site scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SsfModule<T> {
    pub scale: BTreeMap<String, Tensor<T>>,
    pub shift: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SsfModule<T> {
    pub fn identity(spec: &ModelSpec) -> Self {
        let sites = spec.sites();
        Self {
            scale: sites.iter().map(|s| (s.id.clone(), Tensor::ones(vec![s.units]))).collect(),
            shift: sites.iter().map(|s| (s.id.clone(), Tensor::zeros(vec![s.units]))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub active_fraction: f64,
    pub trim_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub step: usize,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    pub trim_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamOutcome<T> {
    /// Final parameters: frozen encoder plus trained head, or the whole
    /// network in scratch mode.
    pub model: ModelInstance<T>,
    pub masks: Option<Vec<MaskSite<T>>>,
    pub ssf: Option<SsfModule<T>>,
    pub history: Vec<HistoryRecord>,
    pub lambda: Option<f64>,
    pub final_eval: FinalEval,
    pub best: Option<BestEval>,
}

struct Ctx<'a, T> {
    mode: Mode,
    spec: &'a ModelSpec,
    /// Parameters that are never trained in this mode.
    fixed: Params<T>,
    frozen_mods: BTreeMap<String, ConstMod<T>>,
    cache: Option<(Tensor<T>, Tensor<T>, Tensor<T>)>,
}

fn split_prefix<'p, T>(params: &'p Params<T>, prefix: &str) -> BTreeMap<String, &'p Tensor<T>> {
    let p = format!("{prefix}/");
    params.iter().filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v))).collect()
}

impl<T: Scalar> Ctx<'_, T> {
    fn masks(&self, trainables: &Params<T>) -> Vec<MaskSite<T>> {
        let logits = split_prefix(trainables, "mask");
        self.spec
            .sites()
            .into_iter()
            .filter_map(|s| logits.get(&s.id).map(|l| MaskSite { site_id: s.id.clone(), kind: s.kind, logits: (*l).clone() }))
            .collect()
    }

    fn const_mods(&self, trainables: &Params<T>) -> BTreeMap<String, ConstMod<T>> {
        let mut mods = self.frozen_mods.clone();
        for m in self.masks(trainables) {
            let g = m.gates().iter().map(|&on| if on { T::one() } else { T::zero() }).collect();
            mods.insert(m.site_id, ConstMod::Gate(Tensor::vector(g)));
        }
        let scale = split_prefix(trainables, "ssf.scale");
        let shift = split_prefix(trainables, "ssf.shift");
        for (site, s) in scale {
            if let Some(b) = shift.get(&site) {
                mods.insert(site, ConstMod::Affine(s.clone(), (*b).clone()));
            }
        }
        mods
    }

    fn model_params(&self, trainables: &Params<T>) -> Params<T> {
        let mut p = self.fixed.clone();
        for (k, v) in trainables {
            if !k.contains('/') {
                p.insert(k.clone(), v.clone());
            }
        }
        p
    }

    fn evaluate(&self, trainables: &Params<T>, data: &Dataset<T>, cached: Option<&Tensor<T>>) -> Result<Eval, TrainError> {
        let logits = match cached {
            Some(emb) => head_on_cached(self.spec, trainables, emb)?,
            None => {
                let params = self.model_params(trainables);
                forward_all(self.spec, &params, &data.features, &self.const_mods(trainables), true)?.1.ok_or(ModelError::MissingHead)?
            }
        };
        let (active_fraction, trim_ratio) = if self.mode == Mode::Mask {
            let stats = mask_statistics(self.spec, &MaskAssignment::from_sites(&self.masks(trainables)))?;
            (stats.active_fraction, stats.trim_ratio)
        } else {
            (1.0, 0.0)
        };
        Ok(Eval { metric: score(&logits, data), active_fraction, trim_ratio })
    }
}

/// Trains the parts each mode owns: the head (probe), head and mask logits
/// (mask), head and per-site scale/shift (ssf), or every parameter of a
/// freshly initialized model (scratch).
pub fn run_downstream<T: Scalar>(
    model: &ModelInstance<T>,
    data: &TaskData<T>,
    cfg: &TrainConfig,
    sparsity: &SparsityConfig,
) -> Result<DownstreamOutcome<T>, TrainError> {
    cfg.validate()?;
    let kind = cfg.resolved_loss(data.train.task)?;
    if kind == LossKind::MaskedMse {
        return Err(TrainError::Config("pretraining runs through run_pretrain".into()));
    }
    let head = model.spec.head.ok_or(ModelError::MissingHead)?;
    if Some(head.outputs) != data.train.task.outputs() {
        return Err(TrainError::Config(format!("head has {} outputs, task needs {:?}", head.outputs, data.train.task.outputs())));
    }
    let input = [model.spec.input.frames, model.spec.input.features];
    if data.train.features.shape()[1..] != input {
        return Err(TrainError::Config(format!("data features {:?} do not match model input {input:?}", &data.train.features.shape()[1..])));
    }
    match cfg.mode {
        Mode::Probe | Mode::Mask | Mode::Ssf if !model.frozen => {
            return Err(TrainError::Config(format!("mode {:?} needs a pretrained (frozen) encoder", cfg.mode)))
        }
        _ => {}
    }
    if cfg.mode == Mode::Mask {
        sparsity.validate().map_err(TrainError::Config)?;
    }

    let base = match cfg.mode {
        Mode::Scratch => ModelInstance::build(model.spec.clone(), cfg.seed)?,
        _ => {
            let mut m = model.clone();
            m.reset_head(Some(head), cfg.seed);
            m
        }
    };
    let spec = base.spec.clone();
    let mut trainables: Params<T> = Params::new();
    let mut fixed: Params<T> = Params::new();
    for (k, v) in &base.params {
        if cfg.mode == Mode::Scratch || is_head_param(k) {
            trainables.insert(k.clone(), v.clone());
        } else {
            fixed.insert(k.clone(), v.clone());
        }
    }
    let mut frozen_mods = BTreeMap::new();
    match cfg.mode {
        Mode::Mask => {
            for m in masking::init_sites::<T>(&spec, sparsity.init_logit) {
                trainables.insert(format!("mask/{}", m.site_id), m.logits);
            }
        }
        Mode::Ssf => {
            let ssf = SsfModule::<T>::identity(&spec);
            for (site, s) in ssf.scale {
                let b = ssf.shift[&site].clone();
                if cfg.freeze_modulation {
                    frozen_mods.insert(site, ConstMod::Affine(s, b));
                } else {
                    trainables.insert(format!("ssf.scale/{site}"), s);
                    trainables.insert(format!("ssf.shift/{site}"), b);
                }
            }
        }
        _ => {}
    }

    let cache = if cfg.mode == Mode::Probe {
        let no_mods = BTreeMap::new();
        Some((
            forward_all(&spec, &fixed, &data.train.features, &no_mods, false)?.0,
            forward_all(&spec, &fixed, &data.val.features, &no_mods, false)?.0,
            forward_all(&spec, &fixed, &data.test.features, &no_mods, false)?.0,
        ))
    } else {
        None
    };
    let ctx = Ctx { mode: cfg.mode, spec: &spec, fixed, frozen_mods, cache };

    let site_ids: Vec<String> = spec.sites().into_iter().map(|s| s.id).collect();
    let mut lambda = LambdaSchedule::<T>::new(sparsity.lambda);
    let train = &data.train;
    let mut step_fn = |tape: &mut Tape<T>, vars: &Vars, idx: &[usize]| -> Result<StepOut, TrainError> {
        let y = targets(train, idx);
        if let Some((emb, _, _)) = &ctx.cache {
            let p = bind_all(tape, &Params::new(), vars);
            let e = tape.constant(emb.select(0, idx)?);
            let logits = forward_head(tape, &spec, &p, e)?;
            let lc = task_loss(tape, logits, &y)?;
            return Ok(StepOut { loss: lc, task: lc, sparsity: None });
        }
        let model_vars: Vars = vars.iter().filter(|(k, _)| !k.contains('/')).map(|(k, &v)| (k.clone(), v)).collect();
        let p = bind_all(tape, &ctx.fixed, &model_vars);
        let mut mods = SiteMods::new();
        let mut mask_vars = Vec::new();
        for site in &site_ids {
            if let Some(&m) = vars.get(&format!("mask/{site}")) {
                mask_vars.push(m);
                let g = masking::binarized(tape, m)?;
                mods.insert(site.clone(), Modulation::Gate(g));
            } else if let (Some(&s), Some(&b)) = (vars.get(&format!("ssf.scale/{site}")), vars.get(&format!("ssf.shift/{site}"))) {
                mods.insert(site.clone(), Modulation::Affine { scale: s, shift: b });
            }
        }
        for (site, m) in &ctx.frozen_mods {
            if let ConstMod::Affine(s, b) = m {
                let (s, b) = (tape.constant(s.clone()), tape.constant(b.clone()));
                mods.insert(site.clone(), Modulation::Affine { scale: s, shift: b });
            }
        }
        let x = tape.constant(train.batch(idx));
        let e = forward_encoder(tape, &spec, &p, x, &mods)?;
        let logits = forward_head(tape, &spec, &p, e)?;
        let lc = task_loss(tape, logits, &y)?;
        if mask_vars.is_empty() {
            return Ok(StepOut { loss: lc, task: lc, sparsity: None });
        }
        let ls = masking::sparsity_loss(tape, &mask_vars, T::of(sparsity.t), sparsity.norm)?;
        let (loss, lam) = masking::total_objective(tape, lc, ls, &mut lambda)?;
        Ok(StepOut { loss, task: lc, sparsity: Some((ls, lam.as_f64())) })
    };
    let val_cache = ctx.cache.as_ref().map(|c| &c.1);
    let mut eval_fn = |params: &Params<T>| ctx.evaluate(params, &data.val, val_cache);
    let res = train_loop(cfg, train.len(), &mut trainables, &mut step_fn, &mut eval_fn)?;
    let lambda = lambda.value().map(|v| v.as_f64());

    let test_cache = ctx.cache.as_ref().map(|c| &c.2);
    let last = ctx.evaluate(&trainables, &data.val, val_cache)?;
    let test = ctx.evaluate(&trainables, &data.test, test_cache)?;
    let final_eval =
        FinalEval { val_metric: last.metric, test_metric: test.metric, active_fraction: last.active_fraction, trim_ratio: last.trim_ratio };
    let best = match &res.best {
        Some((step, m, params)) => {
            let t = ctx.evaluate(params, &data.test, test_cache)?;
            Some(BestEval { step: *step, val_metric: *m, test_metric: t.metric, trim_ratio: t.trim_ratio })
        }
        None => None,
    };

    let masks = (cfg.mode == Mode::Mask).then(|| ctx.masks(&trainables));
    let ssf = (cfg.mode == Mode::Ssf).then(|| {
        let mut m = SsfModule::identity(&spec);
        for (site, t) in split_prefix(&trainables, "ssf.scale") {
            m.scale.insert(site, t.clone());
        }
        for (site, t) in split_prefix(&trainables, "ssf.shift") {
            m.shift.insert(site, t.clone());
        }
        m
    });
    let params = ctx.model_params(&trainables);
    let model = ModelInstance::from_params(spec.clone(), params, cfg.mode != Mode::Scratch)?;
    Ok(DownstreamOutcome { model, masks, ssf, history: res.history, lambda, final_eval, best })
}

/// Task metric of a trained model on `data`, with its mask gates or SSF
/// modulation applied when given.
pub fn evaluate<T: Scalar>(
    model: &ModelInstance<T>,
    masks: Option<&MaskAssignment>,
    ssf: Option<&SsfModule<T>>,
    data: &Dataset<T>,
) -> Result<Option<f64>, TrainError> {
    let mut mods = BTreeMap::new();
    if let Some(m) = masks {
        m.check_against(&model.spec)?;
        for (site, gates) in m.iter() {
            let g = gates.iter().map(|&on| if on { T::one() } else { T::zero() }).collect();
            mods.insert(site.clone(), ConstMod::Gate(Tensor::vector(g)));
        }
    }
    if let Some(s) = ssf {
        for (site, scale) in &s.scale {
            let shift = s.shift.get(site).ok_or_else(|| ModelError::SiteMismatch(format!("ssf shift missing for {site}")))?;
            mods.insert(site.clone(), ConstMod::Affine(scale.clone(), shift.clone()));
        }
    }
    let (_, logits) = forward_all(&model.spec, &model.params, &data.features, &mods, true)?;
    Ok(score(&logits.ok_or(ModelError::MissingHead)?, data))
}

/// For each target ratio, the index of the run whose ratio is nearest; the
/// earliest run wins ties.
pub fn select_for_targets(ratios: &[f64], targets: &[f64]) -> Vec<Option<usize>> {
    targets
        .iter()
        .map(|&t| {
            ratios
                .iter()
                .enumerate()
                .filter(|(_, r)| r.is_finite())
                .fold(None, |best: Option<(usize, f64)>, (i, &r)| match best {
                    Some((_, d)) if (r - t).abs() >= d => best,
                    _ => Some((i, (r - t).abs())),
                })
                .map(|(i, _)| i)
        })
        .collect()
}
