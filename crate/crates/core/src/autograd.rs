//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the recorded
//! nodes once, newest first, and returns the accumulated gradients.
//!
//! The tape is rebuilt for every training step and is confined to the thread
//! that created it. Nodes whose inputs are all constants are recorded without
//! gradient bookkeeping, so a forward pass over frozen weights costs nothing
//! extra in backward.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::instrument;
use crate::scalar::Scalar;
use crate::tensor::{numel, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u32,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Bmm { a: usize, b: usize, trans_b: bool },
    Conv1d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    DepthwiseConv1d { x: usize, w: usize, pad: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { x: usize },
    MulScalar { x: usize, s: T },
    Relu { x: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Sqrt { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<T>, rstd: Vec<T> },
    Sum { x: usize },
    Mean { x: usize },
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    Transpose { x: usize, a1: usize, a2: usize },
    Reshape { x: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    SteRound { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    BceWithLogits { logits: usize, targets: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
    /// Number of op nodes whose backward rule ran.
    pub visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, reason: reason.into() }
}

/// `b` broadcasts against `a` when its shape equals a trailing suffix of `a`'s.
fn broadcast_inner(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(mismatch(op, a, b));
    }
    Ok(numel(b))
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, inner: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    let ad = a.data();
    let bd = b.data();
    if inner == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(ad.len());
    for chunk in ad.chunks_exact(inner) {
        out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// Sums `g` (shaped like the broadcast output) down to the `inner` suffix.
fn reduce_to_inner<T: Scalar>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    if inner == 0 {
        return out;
    }
    for chunk in g.chunks_exact(inner) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn swap_axes<T: Scalar>(data: &[T], shape: &[usize], a1: usize, a2: usize) -> (Vec<T>, Vec<usize>) {
    let (a1, a2) = (a1.min(a2), a1.max(a2));
    let mut out_shape = shape.to_vec();
    out_shape.swap(a1, a2);
    if a1 == a2 || data.is_empty() {
        return (data.to_vec(), out_shape);
    }
    // Everything after a2 is a contiguous block in both layouts.
    let inner: usize = shape[a2 + 1..].iter().product();
    let lead = &out_shape[..=a2];
    let mut src_strides = strides(shape)[..=a2].to_vec();
    src_strides.swap(a1, a2);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; lead.len()];
    let mut src = 0usize;
    loop {
        out.extend_from_slice(&data[src..src + inner]);
        let mut d = lead.len();
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < lead[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh u) = σ(2u), so GELU(x) = x·σ(2u) with u = c·(x + a·x³).
fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    x * sigmoid(u + u)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let s = sigmoid(u + u);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let e = (-x.abs()).exp_fast();
    let num = if x >= T::zero() { T::one() } else { e };
    num / (T::one() + e)
}

/// Binarization threshold shared with [`Tape::ste_round`]: ties round up.
pub fn round_half_up<T: Scalar>(x: T) -> T {
    if x >= T::of(0.5) {
        T::one()
    } else {
        T::zero()
    }
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

struct ConvGeom {
    batch: usize,
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

fn conv_lout(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad >= k && stride > 0).then(|| (len + 2 * pad - k) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cin * g.k;
    let mut cols = vec![T::zero(); g.batch * g.lout * width];
    for b in 0..g.batch {
        for lo in 0..g.lout {
            let row = &mut cols[(b * g.lout + lo) * width..(b * g.lout + lo + 1) * width];
            for j in 0..g.k {
                let pos = (lo * g.stride + j) as isize - g.pad as isize;
                if pos < 0 || pos as usize >= g.len {
                    continue;
                }
                let src = &x[(b * g.len + pos as usize) * g.cin..(b * g.len + pos as usize + 1) * g.cin];
                for (c, &v) in src.iter().enumerate() {
                    row[c * g.k + j] = v;
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cin * g.k;
    let mut dx = vec![T::zero(); g.batch * g.len * g.cin];
    for b in 0..g.batch {
        for lo in 0..g.lout {
            let row = &dcols[(b * g.lout + lo) * width..(b * g.lout + lo + 1) * width];
            for j in 0..g.k {
                let pos = (lo * g.stride + j) as isize - g.pad as isize;
                if pos < 0 || pos as usize >= g.len {
                    continue;
                }
                let dst = &mut dx[(b * g.len + pos as usize) * g.cin..(b * g.len + pos as usize + 1) * g.cin];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d += row[c * g.k + j];
                }
            }
        }
    }
    dx
}

fn pad_time<T: Scalar>(x: &[T], batch: usize, len: usize, ch: usize, pad: usize) -> Vec<T> {
    let plen = len + 2 * pad;
    let mut out = vec![T::zero(); batch * plen * ch];
    for b in 0..batch {
        let src = &x[b * len * ch..(b + 1) * len * ch];
        out[(b * plen + pad) * ch..(b * plen + pad + len) * ch].copy_from_slice(src);
    }
    out
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    /// Number of recorded (non-leaf) operations.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        Ok(v.id)
    }

    /// Value of a recorded variable.
    ///
    /// # Panics
    /// If `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("variable belongs to a different tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { id: self.nodes.len() - 1, tape: self.id }
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push(value, op, rg))
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., K] · b[K, N]`, or `a · bᵀ` with `b[N, K]` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.rank() < 1 || bv.rank() != 2 {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let k = *av.shape().last().unwrap();
        let (bk, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != bk {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let m = if k == 0 { numel(&av.shape()[..av.rank() - 1]) } else { av.len() / k };
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(m, k, n, av.data(), k, 1, bv.data(), rsb, csb, &mut out, n, false);
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.record("matmul", value, Op::MatMul { a: ia, b: ib, trans_b }, &[ia, ib])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `x · wᵀ + bias` with `w[out, in]`, the layout of every linear layer.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_ex(x, w, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Batched `a[B, M, K] · b[B, K, N]` (or `b[B, N, K]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch("bmm", av.shape(), bv.shape()));
        }
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        if k != bk {
            return Err(mismatch("bmm", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); bs * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv.data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                false,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        self.record("bmm", value, Op::Bmm { a: ia, b: ib, trans_b }, &[ia, ib])
    }

    fn conv_geom(&self, op: &'static str, x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
        if x.rank() != 3 || w.rank() != 3 || x.shape()[2] != w.shape()[1] {
            return Err(mismatch(op, x.shape(), w.shape()));
        }
        let (batch, len, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let lout = conv_lout(len, k, stride, pad)
            .ok_or_else(|| invalid(op, format!("input length {len} too short for kernel {k} with padding {pad}")))?;
        Ok(ConvGeom { batch, len, cin, cout, k, stride, pad, lout })
    }

    /// 1-D convolution over time, channels last: `x[B, L, Cin]`,
    /// `w[Cout, Cin, K]`, optional `bias[Cout]` → `[B, Lout, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ibias = bias.map(|b| self.idx(b)).transpose()?;
        let (xv, wv) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let g = self.conv_geom("conv1d", xv, wv, stride, pad)?;
        if let Some(ib) = ibias {
            let bv = &self.nodes[ib].value;
            if bv.shape() != [g.cout] {
                return Err(mismatch("conv1d", wv.shape(), bv.shape()));
            }
        }
        let cols = im2col(xv.data(), &g);
        let width = g.cin * g.k;
        let rows = g.batch * g.lout;
        let mut out = vec![T::zero(); rows * g.cout];
        T::gemm(rows, width, g.cout, &cols, width, 1, wv.data(), 1, width, &mut out, g.cout, false);
        if let Some(ib) = ibias {
            let bd = self.nodes[ib].value.data();
            if g.cout > 0 {
                for row in out.chunks_exact_mut(g.cout) {
                    for (o, &b) in row.iter_mut().zip(bd) {
                        *o += b;
                    }
                }
            }
        }
        let value = Tensor::new(vec![g.batch, g.lout, g.cout], out)?;
        let mut inputs = vec![ix, iw];
        inputs.extend(ibias);
        self.record("conv1d", value, Op::Conv1d { x: ix, w: iw, bias: ibias, stride, pad }, &inputs)
    }

    /// Per-channel convolution, stride 1: `x[B, L, C]`, `w[C, K]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (xv, wv) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if xv.rank() != 3 || wv.rank() != 2 || xv.shape()[2] != wv.shape()[0] {
            return Err(mismatch("depthwise_conv1d", xv.shape(), wv.shape()));
        }
        let (batch, len, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[1];
        let lout = conv_lout(len, k, 1, pad).ok_or_else(|| invalid("depthwise_conv1d", "input shorter than kernel"))?;
        let xp = pad_time(xv.data(), batch, len, ch, pad);
        let plen = len + 2 * pad;
        // w transposed to [K, C] so the inner loop is contiguous.
        let mut wt = vec![T::zero(); k * ch];
        for c in 0..ch {
            for j in 0..k {
                wt[j * ch + c] = wv.data()[c * k + j];
            }
        }
        let mut out = vec![T::zero(); batch * lout * ch];
        for b in 0..batch {
            for lo in 0..lout {
                let o = &mut out[(b * lout + lo) * ch..(b * lout + lo + 1) * ch];
                for j in 0..k {
                    let xrow = &xp[(b * plen + lo + j) * ch..(b * plen + lo + j + 1) * ch];
                    let wrow = &wt[j * ch..(j + 1) * ch];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xrow).zip(wrow) {
                        *o += wv * xv;
                    }
                }
            }
        }
        instrument::record_macs((batch * lout * ch * k) as u64);
        let value = Tensor::new(vec![batch, lout, ch], out)?;
        self.record("depthwise_conv1d", value, Op::DepthwiseConv1d { x: ix, w: iw, pad }, &[ix, iw])
    }

    // ---- elementwise ------------------------------------------------------

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let inner = broadcast_inner(name, av.shape(), bv.shape())?;
        let data = binary(av, bv, inner, f);
        Ok((Tensor::new(av.shape().to_vec(), data)?, ia, ib))
    }

    /// `a + b`, where `b` may broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.elementwise("add", a, b, |x, y| x + y)?;
        self.record("add", v, Op::Add { a: ia, b: ib }, &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.elementwise("sub", a, b, |x, y| x - y)?;
        self.record("sub", v, Op::Sub { a: ia, b: ib }, &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.elementwise("mul", a, b, |x, y| x * y)?;
        self.record("mul", v, Op::Mul { a: ia, b: ib }, &[ia, ib])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| a + s);
        self.record("add_scalar", v, Op::AddScalar { x: ix }, &[ix])
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| a * s);
        self.record("mul_scalar", v, Op::MulScalar { x: ix, s }, &[ix])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| if a > T::zero() { a } else { T::zero() });
        self.record("relu", v, Op::Relu { x: ix }, &[ix])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(gelu);
        self.record("gelu", v, Op::Gelu { x: ix }, &[ix])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(sigmoid);
        self.record("sigmoid", v, Op::Sigmoid { x: ix }, &[ix])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| a.sqrt());
        self.record("sqrt", v, Op::Sqrt { x: ix }, &[ix])
    }

    /// Rounds to {0, 1} at 0.5 (ties up); the gradient passes straight through.
    pub fn ste_round(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(round_half_up);
        self.record("ste_round", v, Op::SteRound { x: ix }, &[ix])
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let d = *xv.shape().last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut out = xv.data().to_vec();
        if d > 0 {
            for row in out.chunks_exact_mut(d) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp_fast();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("softmax", v, Op::Softmax { x: ix }, &[ix])
    }

    /// Layer normalization over the last axis with scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (xv, gv, bv) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let d = *xv.shape().last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if gv.shape() != [d] || bv.shape() != [d] || d == 0 {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let dn = T::of(d as f64);
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.record("layer_norm", v, Op::LayerNorm { x: ix, gamma: ig, beta: ib, mean: means, rstd: rstds }, &[ix, ig, ib])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.data().iter().copied().sum::<T>();
        self.record("sum", Tensor::scalar(s), Op::Sum { x: ix }, &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if xv.is_empty() {
            return Err(invalid("mean", "empty input"));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        self.record("mean", Tensor::scalar(s), Op::Mean { x: ix }, &[ix])
    }

    fn reduce_axis(&self, op: &'static str, ix: usize, axis: usize) -> Result<(Vec<T>, Vec<usize>)> {
        let xv = &self.nodes[ix].value;
        if axis >= xv.rank() {
            return Err(invalid(op, format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let dim = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..dim {
                let src = &xv.data()[(o * dim + a) * inner..(o * dim + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Ok((out, shape))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (out, shape) = self.reduce_axis("sum_axis", ix, axis)?;
        self.record("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x: ix, axis }, &[ix])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (mut out, shape) = self.reduce_axis("mean_axis", ix, axis)?;
        let dim = self.nodes[ix].value.shape()[axis];
        if dim == 0 {
            return Err(invalid("mean_axis", "empty axis"));
        }
        let inv = T::one() / T::of(dim as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.record("mean_axis", Tensor::new(shape, out)?, Op::MeanAxis { x: ix, axis }, &[ix])
    }

    // ---- layout -----------------------------------------------------------

    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if a1 >= xv.rank() || a2 >= xv.rank() {
            return Err(invalid("transpose", format!("axes ({a1}, {a2}) out of range for {:?}", xv.shape())));
        }
        let (data, shape) = swap_axes(xv.data(), xv.shape(), a1, a2);
        self.record("transpose", Tensor::new(shape, data)?, Op::Transpose { x: ix, a1, a2 }, &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.clone().reshaped(shape.to_vec())?;
        self.record("reshape", v, Op::Reshape { x: ix }, &[ix])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(invalid("slice", format!("range {start}..{} on axis {axis} of {:?}", start + len, xv.shape())));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let v = xv.select(axis, &indices)?;
        self.record("slice", v, Op::Slice { x: ix, axis, start }, &[ix])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*ids.first().ok_or_else(|| invalid("concat", "no inputs"))?].value.shape().to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d]) {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.record("concat", Tensor::new(shape, data)?, Op::Concat { xs: ids.clone(), axis }, &ids)
    }

    /// Gathers entries along `axis` (rows when `axis == 0`); indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.select(axis, indices)?;
        self.record("index_select", v, Op::IndexSelect { x: ix, axis, indices: indices.to_vec() }, &[ix])
    }

    // ---- losses -----------------------------------------------------------

    /// Mean softmax cross-entropy of `logits[B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(mismatch("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let c = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let mut total = T::zero();
        for (row, &y) in lv.data().chunks_exact(c).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[y];
        }
        let loss = total / T::of(labels.len() as f64);
        self.record("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits: il, labels: labels.to_vec() }, &[il])
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        if lv.shape() != targets.shape() || lv.is_empty() {
            return Err(mismatch("bce_with_logits", lv.shape(), targets.shape()));
        }
        let mut total = T::zero();
        for (&x, &y) in lv.data().iter().zip(targets.data()) {
            total += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        }
        let loss = total / T::of(lv.len() as f64);
        self.record(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logits: il, targets: targets.data().to_vec() },
            &[il],
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(il + 1);
        grads.resize_with(il + 1, || None);
        grads[il] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut visited = 0;
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let k = *av.shape().last().unwrap();
                let n = *out.shape().last().unwrap();
                let m = if n == 0 { numel(&out.shape()[..out.rank() - 1]) } else { out.len() / n };
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, gd, n, 1, bv.data(), rs, cs, &mut da, k, false);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        T::gemm(n, m, k, gd, 1, n, av.data(), k, 1, &mut db, k, false);
                    } else {
                        T::gemm(k, m, n, av.data(), 1, k, gd, n, 1, &mut db, n, false);
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    for p in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[p * m * n..(p + 1) * m * n],
                            n,
                            1,
                            &bv.data()[p * k * n..(p + 1) * k * n],
                            rs,
                            cs,
                            &mut da[p * m * k..(p + 1) * m * k],
                            k,
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for p in 0..bs {
                        let gp = &gd[p * m * n..(p + 1) * m * n];
                        let ap = &av.data()[p * m * k..(p + 1) * m * k];
                        let dbp = &mut db[p * k * n..(p + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gp, 1, n, ap, k, 1, dbp, k, false);
                        } else {
                            T::gemm(k, m, n, ap, 1, k, gp, n, 1, dbp, n, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Conv1d { x, w, bias, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let geom = self.conv_geom("conv1d", xv, wv, *stride, *pad)?;
                let width = geom.cin * geom.k;
                let rows = geom.batch * geom.lout;
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); rows * width];
                    T::gemm(rows, geom.cout, width, gd, geom.cout, 1, wv.data(), width, 1, &mut dcols, width, false);
                    let dx = col2im(&dcols, &geom);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let cols = im2col(xv.data(), &geom);
                    let mut dw = vec![T::zero(); geom.cout * width];
                    T::gemm(geom.cout, rows, width, gd, 1, geom.cout, &cols, width, 1, &mut dw, width, false);
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let db = reduce_to_inner(gd, geom.cout);
                        self.accumulate(grads, *b, Tensor::new(vec![geom.cout], db)?);
                    }
                }
            }
            Op::DepthwiseConv1d { x, w, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, len, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = wv.shape()[1];
                let lout = out.shape()[1];
                let plen = len + 2 * pad;
                if self.wants(*x) {
                    let mut dxp = vec![T::zero(); batch * plen * ch];
                    for b in 0..batch {
                        for lo in 0..lout {
                            let go = &gd[(b * lout + lo) * ch..(b * lout + lo + 1) * ch];
                            for j in 0..k {
                                let d = &mut dxp[(b * plen + lo + j) * ch..(b * plen + lo + j + 1) * ch];
                                for c in 0..ch {
                                    d[c] += wv.data()[c * k + j] * go[c];
                                }
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); batch * len * ch];
                    for b in 0..batch {
                        dx[b * len * ch..(b + 1) * len * ch]
                            .copy_from_slice(&dxp[(b * plen + pad) * ch..(b * plen + pad + len) * ch]);
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let xp = pad_time(xv.data(), batch, len, ch, *pad);
                    let mut dw = vec![T::zero(); ch * k];
                    for b in 0..batch {
                        for lo in 0..lout {
                            let go = &gd[(b * lout + lo) * ch..(b * lout + lo + 1) * ch];
                            for j in 0..k {
                                let xr = &xp[(b * plen + lo + j) * ch..(b * plen + lo + j + 1) * ch];
                                for c in 0..ch {
                                    dw[c * k + j] += xr[c] * go[c];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let bv = val(*b);
                    let mut db = reduce_to_inner(gd, bv.len());
                    if negate {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let inner = bv.len();
                if self.wants(*a) {
                    let da = binary(g, bv, inner, |x, y| x * y);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let prod: Vec<T> = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    let db = reduce_to_inner(&prod, inner);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar { x, s } => self.accumulate(grads, *x, g.map(|v| v * *s)),
            Op::Relu { x } => {
                let xv = val(*x);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sigmoid { x } => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Sqrt { x } => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * T::of(0.5) / y).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::SteRound { x } => self.accumulate(grads, *x, g.clone()),
            Op::Softmax { x } => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); out.len()];
                if d > 0 {
                    for ((dr, yr), gr) in dx.chunks_exact_mut(d).zip(out.data().chunks_exact(d)).zip(gd.chunks_exact(d)) {
                        let dot = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum::<T>();
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let d = gv.len();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (xr, gr)) in xv.data().chunks_exact(d).zip(gd.chunks_exact(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gv.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let o = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        o[j] = rs * (dxhat[j] - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![d], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![d], dbeta)?);
            }
            Op::Sum { x } => {
                let xv = val(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), gd[0]));
            }
            Op::Mean { x } => {
                let xv = val(*x);
                let s = gd[0] / T::of(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), s));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let xv = val(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let dim = xv.shape()[*axis];
                let inner: usize = xv.shape()[*axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis { .. }) { T::one() / T::of(dim as f64) } else { T::one() };
                let mut dx = Vec::with_capacity(xv.len());
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..dim {
                        dx.extend(src.iter().map(|&v| v * scale));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Transpose { x, a1, a2 } => {
                let (data, shape) = swap_axes(gd, out.shape(), *a1, *a2);
                self.accumulate(grads, *x, Tensor::new(shape, data)?);
            }
            Op::Reshape { x } => {
                let xv = val(*x);
                self.accumulate(grads, *x, g.clone().reshaped(xv.shape().to_vec())?);
            }
            Op::Slice { x, axis, start } => {
                let xv = val(*x);
                let indices: Vec<usize> = (*start..*start + out.shape()[*axis]).collect();
                let dx = scatter_add(xv.shape(), *axis, &indices, gd);
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::IndexSelect { x, axis, indices } => {
                let xv = val(*x);
                let dx = scatter_add(xv.shape(), *axis, indices, gd);
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0;
                for &j in xs {
                    let xv = val(j);
                    let n = xv.shape()[*axis];
                    if self.wants(j) {
                        let indices: Vec<usize> = (offset..offset + n).collect();
                        let gt = g.select(*axis, &indices)?;
                        self.accumulate(grads, j, gt);
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let c = lv.shape()[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut dl = vec![T::zero(); lv.len()];
                for ((row, drow), &y) in lv.data().chunks_exact(c).zip(dl.chunks_exact_mut(c)).zip(labels) {
                    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let s = row.iter().map(|&v| (v - mx).exp()).sum::<T>();
                    for j in 0..c {
                        drow[j] = (row[j] - mx).exp() / s * scale;
                    }
                    drow[y] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits);
                let scale = gd[0] / T::of(lv.len() as f64);
                let dl = lv.data().iter().zip(targets).map(|(&x, &y)| (sigmoid(x) - y) * scale).collect();
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}

fn scatter_add<T: Scalar>(shape: &[usize], axis: usize, indices: &[usize], g: &[T]) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        for (p, &i) in indices.iter().enumerate() {
            let src = &g[(o * indices.len() + p) * inner..(o * indices.len() + p + 1) * inner];
            let dst = &mut dx[(o * dim + i) * inner..(o * dim + i + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(vec![4]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(tape.sqrt(x), Err(TensorError::NonFinite { op: "sqrt" })));
    }

    #[test]
    fn linear_function_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let m = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(m).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap().data(), &[0.25]);
    }

    #[test]
    fn ste_round_threshold_and_identity_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.49, 0.5, 0.51]));
        let r = tape.ste_round(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 1.0, 1.0]);
        let rr = tape.ste_round(r).unwrap();
        assert_eq!(tape.value(rr).data(), tape.value(r).data());
        let up = tape.constant(t(&[3], &[0.3, -2.0, 5.0]));
        let p = tape.mul(r, up).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn ste_through_sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let m = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(m).unwrap();
        let r = tape.ste_round(s).unwrap();
        let loss = tape.sum(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
        let mut other = Tape::<f64>::new();
        let z = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(z), Err(TensorError::NotOnTape)));
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.5, -2.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        // x: B=1, L=5, Cin=2; w: Cout=1, Cin=2, K=3; stride 2, pad 1
        let xd: Vec<f64> = (0..10).map(|i| i as f64 - 3.0).collect();
        let wd = [0.5, -1.0, 2.0, 1.0, 0.25, -0.5];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 5, 2], &xd));
        let w = tape.constant(t(&[1, 2, 3], &wd));
        let b = tape.constant(t(&[1], &[0.1]));
        let y = tape.conv1d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 1]);
        for lo in 0..3 {
            let mut want = 0.1;
            for c in 0..2 {
                for j in 0..3 {
                    let pos = (lo * 2 + j) as isize - 1;
                    if (0..5).contains(&pos) {
                        want += wd[c * 3 + j] * xd[pos as usize * 2 + c];
                    }
                }
            }
            assert!((tape.value(y).data()[lo] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.transpose(x, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_bad_label() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(ce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(tape.cross_entropy(l, &[2]), Err(TensorError::Invalid { .. })));
        let z = tape.constant(t(&[1, 1], &[0.0]));
        let bce = tape.bce_with_logits(z, &t(&[1, 1], &[1.0])).unwrap();
        assert!((tape.value(bce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn constants_only_graph_records_no_backward_work() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[1.0, 1.0]));
        let b = tape.relu(a).unwrap();
        assert!(!tape.requires_grad(b));
        let c = tape.mul(b, p).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.visited, 2);
    }
}
