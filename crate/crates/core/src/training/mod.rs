//! Optimizer, losses, metrics and the training modes.

pub mod metrics;
pub mod optim;
mod run;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::data::{DataError, Dataset, Split, TaskKind, TaskSpec, CHORD_TAGS, TONE_CLASSES};
use crate::masking::MaskingError;
use crate::nn::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub use optim::{adam_step, AdamState, StepOutcome};
pub use run::{
    evaluate, run_downstream, run_pretrain, select_for_targets, BestEval, DownstreamOutcome, FinalEval, PretrainOutcome, SsfModule,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Probe,
    Mask,
    Ssf,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
    MaskedMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to a quarter of `steps` in scratch mode and 0 elsewhere.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    /// Derived from the mode and task when absent.
    pub loss_kind: Option<LossKind>,
    pub eval_every: usize,
    /// Fraction of frames hidden from the encoder during pretraining.
    pub mask_fraction: f64,
    /// SSF only: keep γ = 1, β = 0 fixed.
    pub freeze_modulation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Probe,
            steps: 5000,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: None,
            seed: 0,
            loss_kind: None,
            eval_every: 500,
            mask_fraction: 0.3,
            freeze_modulation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("train.steps must be > 0");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be > 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("train.lr must be > 0");
        }
        if self.warmup() > self.steps {
            return bad("train.warmup_steps must not exceed train.steps");
        }
        if self.eval_every == 0 {
            return bad("train.eval_every must be > 0");
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return bad("train.mask_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(if self.mode == Mode::Scratch { self.steps / 4 } else { 0 })
    }

    /// Learning rate at 1-based `step`: linear ramp `lr·s/warmup` while
    /// `s < warmup`, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup();
        if step < w {
            self.lr * step as f64 / w as f64
        } else {
            self.lr
        }
    }

    pub fn resolved_loss(&self, task: TaskKind) -> Result<LossKind, TrainError> {
        let derived = match (self.mode, task) {
            (Mode::Pretrain, _) => LossKind::MaskedMse,
            (_, TaskKind::ToneClass) => LossKind::CrossEntropy,
            (_, TaskKind::ChordTags) => LossKind::BinaryCrossEntropy,
            (_, TaskKind::Pretext) => return Err(TrainError::Config("downstream modes need a labeled task".into())),
        };
        match self.loss_kind {
            Some(k) if k != derived => Err(TrainError::Config(format!("train.loss_kind {k:?} does not fit mode {:?} on {task:?}", self.mode))),
            _ => Ok(derived),
        }
    }
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    /// Training objective on this step's batch.
    pub loss: f64,
    pub task_loss: f64,
    pub sparsity_loss: Option<f64>,
    pub lambda: Option<f64>,
    /// Validation metric (w-Acc or mAP); absent for pretraining.
    pub metric: Option<f64>,
    pub active_fraction: f64,
    pub trim_ratio: f64,
}

pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(history_jsonl(history).as_bytes())
}

/// Targets for [`task_loss`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    /// Multi-hot `[B, tags]`.
    Tags(Tensor<T>),
}

/// Mean-over-batch task loss.
pub fn task_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Targets<T>) -> Result<Var, TensorError> {
    match targets {
        Targets::Classes(c) => tape.cross_entropy(logits, c),
        Targets::Tags(t) => tape.bce_with_logits(logits, t),
    }
}

/// w-Acc for classification, mAP for tagging, from `[N, outputs]` scores.
pub fn score<T: Scalar>(scores: &Tensor<T>, data: &Dataset<T>) -> Option<f64> {
    let s: Vec<f64> = scores.data().iter().map(|v| v.as_f64()).collect();
    match data.task {
        TaskKind::ToneClass => {
            let pred = metrics::argmax_rows(&s, TONE_CLASSES);
            metrics::weighted_accuracy(&pred, &data.classes(), TONE_CLASSES)
        }
        TaskKind::ChordTags => {
            let t: Vec<bool> = data.tag_matrix().data().iter().map(|&v| v == T::one()).collect();
            metrics::mean_average_precision(&s, &t, CHORD_TAGS)
        }
        TaskKind::Pretext => None,
    }
}

/// Train/validation/test splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> TaskData<T> {
    pub fn build(spec: &TaskSpec) -> Result<Self, DataError> {
        Self::build_threaded(spec, 1)
    }

    pub fn build_threaded(spec: &TaskSpec, threads: usize) -> Result<Self, DataError> {
        let split = |s| Dataset::build_threaded(spec, s, spec.split_size(s), threads);
        Ok(Self { train: split(Split::Train)?, val: split(Split::Val)?, test: split(Split::Test)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = TrainConfig { mode: Mode::Scratch, steps: 100, lr: 1e-3, ..Default::default() };
        assert_eq!(cfg.warmup(), 25);
        assert_eq!(cfg.lr_at(5), 1e-3 * 5.0 / 25.0);
        assert_eq!(cfg.lr_at(25), 1e-3);
        assert_eq!(cfg.lr_at(99), 1e-3);
        assert_eq!(TrainConfig::default().lr_at(1), 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: Some(10), steps: 5, ..Default::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).unwrap_err().to_string().contains("stepz"));
    }

    #[test]
    fn ce_of_uniform_logits_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap());
        let loss = task_loss(&mut tape, l, &Targets::Classes(vec![0])).unwrap();
        assert!((tape.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(task_loss(&mut tape, l, &Targets::Classes(vec![2])).is_err());
    }
}
