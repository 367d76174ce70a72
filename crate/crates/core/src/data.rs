//! Synthetic audio-like tasks and the spectrogram front-end.
//!
//! Every clip is a pure function of `(seed, split, index)`.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::mix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TONE_CLASSES: usize = 10;
pub const CHORD_TAGS: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("index {index} out of range for {split:?} split of {size}")]
    BadIndex { split: Split, index: usize, size: usize },
    #[error("waveform of {len} samples is shorter than one frame ({frame})")]
    TooShort { len: usize, frame: usize },
    #[error("invalid task spec: {0}")]
    Invalid(String),
    #[error("wav export: {0}")]
    Wav(#[from] hound::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ToneClass,
    ChordTags,
    Pretext,
}

impl TaskKind {
    /// Width of the model output for this task; `None` when unlabeled.
    pub fn outputs(self) -> Option<usize> {
        match self {
            TaskKind::ToneClass => Some(TONE_CLASSES),
            TaskKind::ChordTags => Some(CHORD_TAGS),
            TaskKind::Pretext => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub sample_rate: u32,
    pub clip_len: usize,
    pub noise_std: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::ToneClass,
            sample_rate: 8000,
            clip_len: 4000,
            noise_std: 0.05,
            train_size: 2000,
            val_size: 500,
            test_size: 500,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.sample_rate == 0 {
            return Err(DataError::Invalid("sample_rate must be positive".into()));
        }
        if self.clip_len < FeatureSpec::default().frame {
            return Err(DataError::Invalid(format!("clip_len must be at least {} samples", FeatureSpec::default().frame)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(DataError::Invalid("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// SplitMix64: a 64-bit counter advanced by the golden-ratio increment and
/// finalized with two xor-shift/multiply rounds.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn for_clip(seed: u64, split: Split, index: usize) -> Self {
        Self::new(mix64(mix64(mix64(seed) ^ split.id()) ^ index as u64))
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.state);
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        out
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Class(usize),
    Tags([bool; CHORD_TAGS]),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub waveform: Vec<f64>,
    /// The waveform before noise is added.
    pub clean: Vec<f64>,
    pub labels: Labels,
}

pub fn tone_frequency(class: usize) -> f64 {
    110.0 + 55.0 * class as f64
}

pub fn chord_frequency(tag: usize) -> f64 {
    130.0 * 2f64.powf(tag as f64 / 4.0)
}

fn add_sine(buf: &mut [f64], freq: f64, amp: f64, phase: f64, rate: f64) {
    for (n, s) in buf.iter_mut().enumerate() {
        *s += amp * (2.0 * PI * freq * n as f64 / rate + phase).sin();
    }
}

fn add_harmonic_tone(buf: &mut [f64], f0: f64, rate: f64, rng: &mut SplitMix64) {
    for (h, amp) in [1.0, 0.5, 0.25].into_iter().enumerate() {
        let phase = 2.0 * PI * rng.uniform();
        add_sine(buf, f0 * (h + 1) as f64, amp, phase, rate);
    }
}

pub fn generate(spec: &TaskSpec, split: Split, index: usize) -> Result<Clip, DataError> {
    let size = spec.split_size(split);
    if index >= size {
        return Err(DataError::BadIndex { split, index, size });
    }
    let mut rng = SplitMix64::for_clip(spec.seed, split, index);
    let rate = f64::from(spec.sample_rate);
    let mut clean = vec![0.0; spec.clip_len];
    let labels = match spec.task {
        TaskKind::ToneClass => {
            let c = rng.below(TONE_CLASSES as u64) as usize;
            add_harmonic_tone(&mut clean, tone_frequency(c), rate, &mut rng);
            Labels::Class(c)
        }
        TaskKind::ChordTags => {
            let mut tags = [false; CHORD_TAGS];
            for (k, tag) in tags.iter_mut().enumerate() {
                *tag = rng.uniform() < 0.35;
                let phase = 2.0 * PI * rng.uniform();
                if *tag {
                    add_sine(&mut clean, chord_frequency(k), 0.5, phase, rate);
                }
            }
            Labels::Tags(tags)
        }
        TaskKind::Pretext => {
            let voices = 1 + rng.below(3);
            for _ in 0..voices {
                let f0 = 80.0 + 720.0 * rng.uniform();
                let gain = 0.25 + 0.75 * rng.uniform();
                let mut voice = vec![0.0; spec.clip_len];
                add_harmonic_tone(&mut voice, f0, rate, &mut rng);
                clean.iter_mut().zip(&voice).for_each(|(c, v)| *c += gain * v);
            }
            Labels::None
        }
    };
    let waveform = clean.iter().map(|&s| s + spec.noise_std * rng.normal()).collect();
    Ok(Clip { waveform, clean, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub frame: usize,
    pub hop: usize,
    pub bins: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { frame: 256, hop: 128, bins: 128 }
    }
}

impl FeatureSpec {
    pub fn frames(&self, len: usize) -> usize {
        if len < self.frame {
            0
        } else {
            1 + (len - self.frame) / self.hop
        }
    }
}

/// `log1p |DFT|` of each rectangular-window frame, first `bins` bins:
/// `[frames, bins]`.
pub fn featurize(waveform: &[f64]) -> Result<Tensor<f64>, DataError> {
    featurize_with(waveform, &FeatureSpec::default())
}

pub fn featurize_with(waveform: &[f64], fs: &FeatureSpec) -> Result<Tensor<f64>, DataError> {
    if waveform.len() < fs.frame {
        return Err(DataError::TooShort { len: waveform.len(), frame: fs.frame });
    }
    let frames = fs.frames(waveform.len());
    let fft = FftPlanner::new().plan_fft_forward(fs.frame);
    let mut buf = vec![Complex::new(0.0, 0.0); fs.frame];
    let mut out = Vec::with_capacity(frames * fs.bins);
    for f in 0..frames {
        let start = f * fs.hop;
        for (b, &s) in buf.iter_mut().zip(&waveform[start..start + fs.frame]) {
            *b = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..fs.bins].iter().map(|c| c.norm().ln_1p()));
    }
    Ok(Tensor::new(vec![frames, fs.bins], out).expect("frames * bins values"))
}

/// Features and targets of one split, materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub task: TaskKind,
    /// `[N, frames, bins]`
    pub features: Tensor<T>,
    pub labels: Vec<Labels>,
}

impl<T: Scalar> Dataset<T> {
    pub fn build(spec: &TaskSpec, split: Split) -> Result<Self, DataError> {
        Self::build_n(spec, split, spec.split_size(split))
    }

    /// The first `n` clips of a split.
    pub fn build_n(spec: &TaskSpec, split: Split, n: usize) -> Result<Self, DataError> {
        Self::build_threaded(spec, split, n, 1)
    }

    /// Same result as [`Dataset::build_n`]; clips are generated on up to
    /// `threads` workers, each owning a contiguous index range.
    pub fn build_threaded(spec: &TaskSpec, split: Split, n: usize, threads: usize) -> Result<Self, DataError> {
        spec.validate()?;
        let fs = FeatureSpec::default();
        let frames = fs.frames(spec.clip_len);
        let per = n.div_ceil(threads.max(1)).max(1);
        let work = |range: std::ops::Range<usize>| -> Result<(Vec<T>, Vec<Labels>), DataError> {
            let mut data = Vec::with_capacity(range.len() * frames * fs.bins);
            let mut labels = Vec::with_capacity(range.len());
            for i in range {
                let clip = generate(spec, split, i)?;
                let feats = featurize_with(&clip.waveform, &fs)?;
                data.extend(feats.data().iter().map(|&v| T::of(v)));
                labels.push(clip.labels);
            }
            Ok((data, labels))
        };
        let ranges: Vec<_> = (0..n).step_by(per).map(|s| s..(s + per).min(n)).collect();
        let parts = if ranges.len() <= 1 {
            ranges.into_iter().map(work).collect::<Vec<_>>()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = ranges.into_iter().map(|r| scope.spawn(|| work(r))).collect();
                handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
            })
        };
        let mut data = Vec::with_capacity(n * frames * fs.bins);
        let mut labels = Vec::with_capacity(n);
        for part in parts {
            let (d, l) = part?;
            data.extend(d);
            labels.extend(l);
        }
        let features = Tensor::new(vec![n, frames, fs.bins], data).expect("consistent sizes");
        Ok(Self { task: spec.task, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features of the listed examples, `[indices.len(), frames, bins]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        self.features.select(0, indices).expect("indices in range")
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().map(|l| if let Labels::Class(c) = l { *c } else { 0 }).collect()
    }

    /// Multi-hot targets `[N, tags]`.
    pub fn tag_matrix(&self) -> Tensor<T> {
        let mut out = Vec::with_capacity(self.len() * CHORD_TAGS);
        for l in &self.labels {
            let tags = if let Labels::Tags(t) = l { *t } else { [false; CHORD_TAGS] };
            out.extend(tags.iter().map(|&on| if on { T::one() } else { T::zero() }));
        }
        Tensor::new(vec![self.len(), CHORD_TAGS], out).expect("N * tags values")
    }
}

/// 16-bit PCM mono, scaled down only when the clip would clip.
pub fn export_wav(path: &Path, waveform: &[f64], sample_rate: u32) -> Result<(), DataError> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let peak = waveform.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in waveform {
        w.write_sample((s * scale * f64::from(i16::MAX)).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        assert_eq!(FeatureSpec::default().frames(4000), 30);
        assert_eq!(FeatureSpec::default().frames(256), 1);
        assert!(featurize(&[0.0; 255]).is_err());
    }

    #[test]
    fn zero_waveform_gives_zero_features() {
        let f = featurize(&[0.0; 4000]).unwrap();
        assert_eq!(f.shape(), &[30, 128]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clips_are_deterministic() {
        let spec = TaskSpec::default();
        let a = generate(&spec, Split::Train, 17).unwrap();
        let b = generate(&spec, Split::Train, 17).unwrap();
        assert!(a.waveform.iter().zip(&b.waveform).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(generate(&spec, Split::Val, 500).is_err());
    }

    #[test]
    fn worker_count_does_not_change_the_dataset() {
        let spec = TaskSpec { task: TaskKind::ChordTags, ..TaskSpec::default() };
        let one = Dataset::<f32>::build_threaded(&spec, Split::Test, 11, 1).unwrap();
        let four = Dataset::<f32>::build_threaded(&spec, Split::Test, 11, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(Dataset::<f32>::build_threaded(&spec, Split::Test, 0, 3).unwrap().len(), 0);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SplitMix64::new(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(10) < 10);
        }
    }
}
