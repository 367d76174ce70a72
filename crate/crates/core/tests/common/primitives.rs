//! Random small instances of every differentiable primitive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trimlab::masking::{sparsity_loss, MaskingError, SparsityNorm};
use trimlab::{Tape, Tensor, TensorError, Var};

use super::{random, random_away_from_zero};

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;
pub type Case = (Vec<Tensor<f64>>, Build);

pub struct Primitive {
    pub name: &'static str,
    pub seed: u64,
    pub make: fn(&mut ChaCha8Rng) -> Case,
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.gen_range(1..5)
}

fn masking_err(e: MaskingError) -> TensorError {
    match e {
        MaskingError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn sparsity(r: &mut ChaCha8Rng, norm: SparsityNorm) -> Case {
    let sites = r.gen_range(1..4);
    let th = r.gen_range(0.3..0.7);
    let inputs: Vec<Tensor<f64>> = (0..sites).map(|_| random(&[r.gen_range(1..6)], r, -3.0, 3.0)).collect();
    (inputs, Box::new(move |t, v| sparsity_loss(t, v, th, norm).map_err(masking_err)))
}

fn sparsity_per_site(r: &mut ChaCha8Rng) -> Case {
    sparsity(r, SparsityNorm::PerSite)
}

fn sparsity_per_unit(r: &mut ChaCha8Rng) -> Case {
    sparsity(r, SparsityNorm::PerUnit)
}

fn matmul(r: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (dim(r), dim(r), dim(r));
    let trans = r.gen_bool(0.5);
    let b = if trans { random(&[n, k], r, -1.0, 1.0) } else { random(&[k, n], r, -1.0, 1.0) };
    (vec![random(&[m, k], r, -1.0, 1.0), b], Box::new(move |t, v| t.matmul_ex(v[0], v[1], trans)))
}

fn linear(r: &mut ChaCha8Rng) -> Case {
    let (b, s, i, o) = (dim(r), dim(r), dim(r), dim(r));
    let inputs = vec![random(&[b, s, i], r, -1.0, 1.0), random(&[o, i], r, -1.0, 1.0), random(&[o], r, -1.0, 1.0)];
    (inputs, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
}

fn bmm(r: &mut ChaCha8Rng) -> Case {
    let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
    let trans = r.gen_bool(0.5);
    let rhs = if trans { random(&[b, n, k], r, -1.0, 1.0) } else { random(&[b, k, n], r, -1.0, 1.0) };
    (vec![random(&[b, m, k], r, -1.0, 1.0), rhs], Box::new(move |t, v| t.bmm(v[0], v[1], trans)))
}

fn conv1d(r: &mut ChaCha8Rng) -> Case {
    let (b, cin, cout) = (dim(r), dim(r), dim(r));
    let k = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..k);
    let len = r.gen_range(k..k + 5);
    let inputs = vec![random(&[b, len, cin], r, -1.0, 1.0), random(&[cout, cin, k], r, -1.0, 1.0), random(&[cout], r, -1.0, 1.0)];
    (inputs, Box::new(move |t, v| t.conv1d(v[0], v[1], Some(v[2]), stride, pad)))
}

fn depthwise_conv1d(r: &mut ChaCha8Rng) -> Case {
    let (b, c, len) = (dim(r), dim(r), r.gen_range(2..7));
    let k = 2 * r.gen_range(0..3) + 1;
    let inputs = vec![random(&[b, len, c], r, -1.0, 1.0), random(&[c, k], r, -1.0, 1.0)];
    (inputs, Box::new(move |t, v| t.depthwise_conv1d(v[0], v[1], k / 2)))
}

fn elementwise_binary(r: &mut ChaCha8Rng) -> Case {
    let (a, b, c) = (dim(r), dim(r), dim(r));
    let broadcast = r.gen_bool(0.5);
    let rhs = if broadcast { random(&[c], r, -1.0, 1.0) } else { random(&[a, b, c], r, -1.0, 1.0) };
    let op = r.gen_range(0..3);
    (
        vec![random(&[a, b, c], r, -1.0, 1.0), rhs],
        Box::new(move |t, v| match op {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        }),
    )
}

fn scalar_ops(r: &mut ChaCha8Rng) -> Case {
    let s = r.gen_range(-2.0..2.0);
    let shape = [dim(r), dim(r)];
    (
        vec![random(&shape, r, -1.0, 1.0)],
        Box::new(move |t, v| {
            let y = t.add_scalar(v[0], s)?;
            let y = t.mul(y, v[0])?;
            t.mul_scalar(y, s)
        }),
    )
}

fn relu(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    (vec![random_away_from_zero(&shape, r, 1e-3)], Box::new(|t, v| t.relu(v[0])))
}

fn gelu(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    (vec![random(&shape, r, -4.0, 4.0)], Box::new(|t, v| t.gelu(v[0])))
}

fn sigmoid(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    (vec![random(&shape, r, -6.0, 6.0)], Box::new(|t, v| t.sigmoid(v[0])))
}

fn sqrt(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    (vec![random(&shape, r, 0.1, 3.0)], Box::new(|t, v| t.sqrt(v[0])))
}

fn softmax(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r), r.gen_range(2..6)];
    (vec![random(&shape, r, -3.0, 3.0)], Box::new(|t, v| t.softmax(v[0])))
}

fn layer_norm(r: &mut ChaCha8Rng) -> Case {
    let (b, d) = (dim(r), r.gen_range(2..6));
    let inputs = vec![random(&[b, dim(r), d], r, -2.0, 2.0), random(&[d], r, 0.5, 1.5), random(&[d], r, -1.0, 1.0)];
    (inputs, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)))
}

fn reductions(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r), dim(r)];
    let axis = r.gen_range(0..3);
    let op = r.gen_range(0..4);
    (
        vec![random(&shape, r, -1.0, 1.0)],
        Box::new(move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            match op {
                0 => t.sum(sq),
                1 => t.mean(sq),
                2 => t.sum_axis(sq, axis),
                _ => t.mean_axis(sq, axis),
            }
        }),
    )
}

fn shape_ops(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r), dim(r), dim(r)];
    let (a1, a2) = (r.gen_range(0..4), r.gen_range(0..4));
    let axis = r.gen_range(0..4);
    let start = r.gen_range(0..shape[axis]);
    let len = r.gen_range(0..=shape[axis] - start);
    let n: usize = shape.iter().product();
    (
        vec![random(&shape, r, -1.0, 1.0)],
        Box::new(move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let x = t.transpose(sq, a1, a2)?;
            let x = t.reshape(x, &[n])?;
            let x = t.reshape(x, &shape)?;
            let y = t.slice(v[0], axis, start, len)?;
            let y = t.sum(y)?;
            let x = t.sum(x)?;
            t.add(x, y)
        }),
    )
}

fn concat_and_index_select(r: &mut ChaCha8Rng) -> Case {
    let (a, b) = (dim(r), dim(r));
    let (c1, c2) = (dim(r), dim(r));
    let axis = r.gen_range(0..2);
    let (s1, s2) = if axis == 0 { ([c1, b], [c2, b]) } else { ([a, c1], [a, c2]) };
    let total = if axis == 0 { c1 + c2 } else { c1 + c2 };
    let idx: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..total)).collect();
    (
        vec![random(&s1, r, -1.0, 1.0), random(&s2, r, -1.0, 1.0)],
        Box::new(move |t, v| {
            let c = t.concat(&[v[0], v[1]], axis)?;
            let c = t.mul(c, c)?;
            t.index_select(c, axis, &idx)
        }),
    )
}

fn cross_entropy(r: &mut ChaCha8Rng) -> Case {
    let (b, c) = (dim(r), r.gen_range(2..6));
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
    (vec![random(&[b, c], r, -3.0, 3.0)], Box::new(move |t, v| t.cross_entropy(v[0], &labels)))
}

fn bce_with_logits(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    let n = shape[0] * shape[1];
    let targets = Tensor::new(shape.to_vec(), (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
    (vec![random(&shape, r, -4.0, 4.0)], Box::new(move |t, v| t.bce_with_logits(v[0], &targets)))
}

pub const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "matmul", seed: 1, make: matmul },
    Primitive { name: "linear", seed: 2, make: linear },
    Primitive { name: "bmm", seed: 3, make: bmm },
    Primitive { name: "conv1d", seed: 4, make: conv1d },
    Primitive { name: "depthwise_conv1d", seed: 5, make: depthwise_conv1d },
    Primitive { name: "add/sub/mul", seed: 6, make: elementwise_binary },
    Primitive { name: "add_scalar/mul_scalar", seed: 7, make: scalar_ops },
    Primitive { name: "relu", seed: 8, make: relu },
    Primitive { name: "gelu", seed: 9, make: gelu },
    Primitive { name: "sigmoid", seed: 10, make: sigmoid },
    Primitive { name: "sqrt", seed: 11, make: sqrt },
    Primitive { name: "softmax", seed: 12, make: softmax },
    Primitive { name: "layer_norm", seed: 13, make: layer_norm },
    Primitive { name: "sum/mean/sum_axis/mean_axis", seed: 14, make: reductions },
    Primitive { name: "transpose/reshape/slice", seed: 15, make: shape_ops },
    Primitive { name: "concat/index_select", seed: 16, make: concat_and_index_select },
    Primitive { name: "cross_entropy", seed: 17, make: cross_entropy },
    Primitive { name: "bce_with_logits", seed: 18, make: bce_with_logits },
    Primitive { name: "sparsity_loss/per_site", seed: 19, make: sparsity_per_site },
    Primitive { name: "sparsity_loss/per_unit", seed: 20, make: sparsity_per_unit },
];
