//! Shared helpers for integration tests.
#![allow(dead_code)]

pub mod primitives;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimlab::nn::{BackboneConfig, BackboneKind, InputSpec, ModelSpec};
use trimlab::{Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `±[gap, 1.5]`, away from kinks at zero.
pub fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'a;

fn scalarize(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    if tape.value(out).len() == 1 && tape.value(out).rank() == 0 {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let y = tape.mul(out, w)?;
    tape.sum(y)
}

fn eval(inputs: &[Tensor<f64>], build: &Build<'_>, weights: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalarize(&mut tape, out, weights).unwrap();
    tape.value(loss).item().unwrap()
}

/// Relative error `‖g − ĝ‖₂ / (‖g‖₂ + ‖ĝ‖₂)` between reverse-mode gradients and
/// central finite differences of `Σ w ⊙ f(inputs)` over every input element,
/// with fixed random weights `w` (or `f` itself when it returns a scalar).
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Build<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let weights = random(tape.shape(out), rng, -1.0, 1.0);
    let loss = scalarize(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(*v).unwrap_or(&zero);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, build, &weights) - eval(&minus, build, &weights)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Tiny versions of the three backbones.
pub fn small_spec(kind: BackboneKind, outputs: Option<usize>) -> ModelSpec {
    let mut cfg = BackboneConfig::with_kind(kind);
    cfg.conv_channels = vec![6, 8, 8, 10];
    cfg.d_model = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 4;
    cfg.ffn_hidden = 12;
    cfg.conformer_channels = 6;
    cfg.conformer_kernel = 3;
    cfg.head_hidden = 7;
    cfg.build_spec(InputSpec { frames: 10, features: 5 }, outputs).unwrap()
}

pub const BACKBONES: [BackboneKind; 3] = [BackboneKind::ConvT, BackboneKind::TransformerT, BackboneKind::ConformerT];

/// Largest gradcheck error over `instances` random cases of one primitive.
pub fn worst_gradcheck_error(p: &primitives::Primitive, instances: usize) -> f64 {
    let mut r = rng(p.seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, build) = (p.make)(&mut r);
        worst = worst.max(gradcheck(&inputs, build.as_ref(), &mut r));
    }
    worst
}
