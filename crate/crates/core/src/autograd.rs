//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in exact reverse recording order and accumulates gradients into the
//! leaves that were created with `requires_grad`. Nodes whose inputs carry no
//! gradient are evaluated but never visited on the way back, so frozen
//! sub-graphs cost only their forward pass.
//!
//! A tape is built for one forward/backward pass and then dropped; parameters
//! live outside it and are re-bound as leaves for every step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Affine { x: usize, w: usize, b: usize },
    Scale { x: usize, c: f64 },
    GradReverse { x: usize, scale: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// `cdf` is Φ(x), kept for the backward pass.
    Gelu { x: usize, cdf: Vec<f64> },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Dropout { x: usize, mask: Vec<f64> },
    ConcatLast { a: usize, b: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    SumLast { x: usize },
    Sqrt { x: usize },
    Abs { x: usize },
    Transpose { x: usize },
    L2NormalizeRows { x: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only leaves with `requires_grad` carry one.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grl_sign_bug: bool,
}

/// `c = beta·c + a·b` for an `m×k` by `k×n` product with explicit strides,
/// writing through a raw pointer so `c` may be uninitialized when `beta = 0`.
///
/// # Safety
/// `a` and `b` must cover their strided views, `c` must be valid for `m·n`
/// writes (and reads unless `beta = 0`) and must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: *mut f64,
) {
    if k == 0 {
        for i in 0..m * n {
            let v = if beta == 0.0 { 0.0 } else { beta * *c.add(i) };
            c.add(i).write(v);
        }
        return;
    }
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a.as_ptr(),
        rsa as isize,
        csa as isize,
        b.as_ptr(),
        rsb as isize,
        csb as isize,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Fresh `m×n` product `a·b`.
fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 dgemm only writes `c`, covering all m·n slots
    // before `set_len` exposes them.
    unsafe {
        gemm_raw(m, k, n, a, sa, b, sb, 0.0, c.as_mut_ptr());
        c.set_len(m * n);
    }
    c
}

/// Adds a gemm result into the gradient slot of `id`, or stores it
/// directly on first touch.
fn acc_gemm(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    (m, k, n): (usize, usize, usize),
    a: (&[f64], (usize, usize)),
    b: (&[f64], (usize, usize)),
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(c) => {
            debug_assert_eq!(c.len(), m * n);
            // SAFETY: the slot has the node's m·n shape and is owned here.
            unsafe { gemm_raw(m, k, n, a.0, a.1, b.0, b.1, 1.0, c.as_mut_ptr()) }
        }
        slot => *slot = Some(gemm_new(m, k, n, a.0, a.1, b.0, b.1)),
    }
}

/// Adds `vals` elementwise into the gradient slot of `id`, or collects them
/// on first touch instead of accumulating into zeros.
fn acc_map(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, vals: impl Iterator<Item = f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(d) => d.iter_mut().zip(vals).for_each(|(d, v)| *d += v),
        slot => *slot = Some(vals.collect()),
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64, cdf: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: makes the gradient-reversal node propagate `+scale·g`.
    #[doc(hidden)]
    pub fn inject_grl_sign_bug(&mut self, enabled: bool) {
        self.grl_sign_bug = enabled;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` until the
    /// first [`Tape::backward`] or [`Tape::zero_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Moves a leaf's accumulated gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let n = node.value.len();
                let g = node.grad.get_or_insert_with(Vec::new);
                g.clear();
                g.resize(n, 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn two_d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d("matmul", a)?;
        let (k2, n) = self.two_d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm_new(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1));
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d("matmul_nt", a)?;
        let (n, k2) = self.two_d("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = gemm_new(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k));
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Hadamard { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds a bias vector to every row (broadcast over the last dimension).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            data.extend(row.iter().zip(b).map(|(v, b)| v + b));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    /// `x·w + b` for `x: m×k`, `w: k×n`, `b: n`; one node instead of
    /// [`Tape::matmul`] followed by [`Tape::add_bias`], with the same result.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d("affine", x)?;
        let (k2, n) = self.two_d("affine", w)?;
        if k != k2 || self.shape(b) != [n] {
            return Err(Error::shape("affine", self.shape(x), self.shape(w)));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        // SAFETY: `out` holds m·n initialized values and aliases neither input.
        unsafe {
            gemm_raw(m, k, n, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), 1.0, out.as_mut_ptr());
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Affine { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        self.push(value, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-scale` on the backward pass.
    pub fn grad_reverse(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::invalid(format!("grad_reverse scale must be > 0, got {scale}")));
        }
        let value = self.value(x).clone();
        Ok(self.push(value, Op::GradReverse { x: x.0, scale }, &[x.0]))
    }

    /// Per-row standardization over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let (mut cdf, mut data) = (Vec::with_capacity(xv.len()), Vec::with_capacity(xv.len()));
        for &v in xv {
            let c = normal_cdf(v);
            cdf.push(c);
            data.push(v * c);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        let cdf = if self.nodes[x.0].requires_grad { cdf } else { Vec::new() };
        self.push(value, Op::Gelu { x: x.0, cdf }, &[x.0])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { x: x.0, axis }, &[x.0]))
    }

    /// Inverted dropout. Identity (the same `Var`) when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        // One 32-bit draw per element: kept iff u < keep·2³².
        let threshold = (keep * 4294967296.0) as u64;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if (rng.next_u32() as u64) < threshold { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let sa = av.shape();
        let sb = bv.shape();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", sa, sb));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatLast { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows needs at least one input"));
        };
        let (_, c) = self.two_d("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.two_d("concat_rows", p)?;
            if c2 != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatRows { parts: ids.clone() }, &ids))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.two_d("slice_rows", x)?;
        if start >= end || end > r {
            return Err(Error::invalid(format!("slice_rows: {start}..{end} is not a non-empty range within {r} rows")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let value = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(value, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    /// Splits the last dimension into `out_len` contiguous near-equal bins
    /// (`[⌊i·L/n⌋, ⌈(i+1)·L/n⌉)`) and keeps each bin's maximum.
    pub fn adaptive_max_pool_1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let len = xv.cols();
        if out_len == 0 || out_len > len {
            return Err(Error::invalid(format!(
                "adaptive_max_pool_1d: out_len {out_len} must be in 1..={len}"
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = xv.row(r);
            for i in 0..out_len {
                let start = i * len / out_len;
                let end = ((i + 1) * len).div_ceil(out_len);
                let mut best = start;
                for j in start + 1..end {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(r * len + best);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, &[x.0])
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let shape = v.shape()[..v.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data).expect("sum_last shape");
        self.push(value, Op::SumLast { x: x.0 }, &[x.0])
    }

    /// Elementwise square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::sqrt);
        self.push(value, Op::Sqrt { x: x.0 }, &[x.0])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::abs);
        self.push(value, Op::Abs { x: x.0 }, &[x.0])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.hadamard(x, x).expect("square of identical shapes")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.two_d("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { x: x.0 }, &[x.0]))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { row: r });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        debug_assert_eq!(out.len(), xv.rows() * c);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x: x.0, norms }, &[x.0]))
    }

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    ///
    /// Repeated calls accumulate; use [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_updates.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in leaf_updates {
            let node = &mut self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                None => node.grad = Some(g),
            }
        }
        // Leaves the loss does not depend on still report a zero gradient.
        for node in self.nodes.iter_mut().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($id:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(grads, nodes, $id) {
                    $body
                }
            };
        }
        let val = |id: usize| nodes[id].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                acc_gemm(grads, nodes, *a, (m, n, k), (g, (n, 1)), (val(*b), (1, n)));
                acc_gemm(grads, nodes, *b, (k, m, n), (val(*a), (1, k)), (g, (n, 1)));
            }
            Op::Affine { x, w, b } => {
                let (m, k) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let n = nodes[*w].value.shape()[1];
                acc_gemm(grads, nodes, *x, (m, n, k), (g, (n, 1)), (val(*w), (1, n)));
                acc_gemm(grads, nodes, *w, (k, m, n), (val(*x), (1, k)), (g, (n, 1)));
                acc!(*b, |db| {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                });
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[0];
                acc_gemm(grads, nodes, *a, (m, n, k), (g, (n, 1)), (val(*b), (k, 1)));
                acc_gemm(grads, nodes, *b, (n, m, k), (g, (1, n)), (val(*a), (k, 1)));
            }
            Op::Add { a, b } => {
                acc_map(grads, nodes, *a, g.iter().copied());
                acc_map(grads, nodes, *b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                acc_map(grads, nodes, *a, g.iter().copied());
                acc_map(grads, nodes, *b, g.iter().map(|g| -g));
            }
            Op::Hadamard { a, b } => {
                acc_map(grads, nodes, *a, g.iter().zip(val(*b)).map(|(g, y)| g * y));
                acc_map(grads, nodes, *b, g.iter().zip(val(*a)).map(|(g, x)| g * x));
            }
            Op::AddBias { x, bias } => {
                let c = nodes[*bias].value.len();
                acc_map(grads, nodes, *x, g.iter().copied());
                acc!(*bias, |db| {
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                });
            }
            Op::Scale { x, c } => {
                acc_map(grads, nodes, *x, g.iter().map(|g| c * g));
            }
            Op::GradReverse { x, scale } => {
                let factor = if self.grl_sign_bug { *scale } else { -*scale };
                acc_map(grads, nodes, *x, g.iter().map(|g| factor * g));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = nodes[*gain].value.len();
                let gain_v = val(*gain);
                acc!(*gain, |dg| {
                    for (row, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, gv), h) in dg.iter_mut().zip(row).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                });
                acc!(*bias, |db| {
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                });
                acc!(*x, |dx| {
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let off = r * c;
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = g[off + j] * gain_v[j];
                            dxhat[j] = d;
                            sum_d += d;
                            sum_dh += d * xhat[off + j];
                        }
                        for j in 0..c {
                            dx[off + j] += inv / n * (n * dxhat[j] - sum_d - xhat[off + j] * sum_dh);
                        }
                    }
                });
            }
            Op::Gelu { x, cdf } => {
                let vals = g.iter().zip(val(*x)).zip(cdf).map(|((g, xv), c)| g * gelu_grad(*xv, *c));
                acc_map(grads, nodes, *x, vals);
            }
            Op::Softmax { x, axis } => {
                let y = val(i);
                let (outer, len, inner) = axis_split(nodes[i].value.shape(), *axis);
                acc!(*x, |dx| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + q;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = val(i);
                let (outer, len, inner) = axis_split(nodes[i].value.shape(), *axis);
                acc!(*x, |dx| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + q;
                            let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc_map(grads, nodes, *x, g.iter().zip(mask).map(|(g, m)| g * m));
            }
            Op::ConcatLast { a, b } => {
                let ca = nodes[*a].value.cols();
                let cb = nodes[*b].value.cols();
                let rows = nodes[*a].value.rows();
                acc!(*a, |da| {
                    for r in 0..rows {
                        for j in 0..ca {
                            da[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
                acc!(*b, |db| {
                    for r in 0..rows {
                        for j in 0..cb {
                            db[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc!(p, |dp| {
                        dp.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let off = start * nodes[*x].value.cols();
                acc!(*x, |dx| {
                    dx[off..off + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                });
            }
            Op::MaxPool { x, argmax } => {
                acc!(*x, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::Sum { x } => {
                acc!(*x, |dx| { dx.iter_mut().for_each(|d| *d += g[0]) });
            }
            Op::Mean { x } => {
                let n = nodes[*x].value.len() as f64;
                acc!(*x, |dx| { dx.iter_mut().for_each(|d| *d += g[0] / n) });
            }
            Op::SumLast { x } => {
                let c = nodes[*x].value.cols();
                acc!(*x, |dx| {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d += g[j / c];
                    }
                });
            }
            Op::Sqrt { x } => {
                let y = val(i);
                acc!(*x, |dx| {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                        if *y > 0.0 {
                            *d += g / (2.0 * y);
                        }
                    }
                });
            }
            Op::Abs { x } => {
                acc!(*x, |dx| {
                    for ((d, g), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += g;
                        } else if *xv < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (r, c) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                acc!(*x, |dx| {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = val(i);
                let c = nodes[i].value.cols();
                acc!(*x, |dx| {
                    for (r, n) in norms.iter().enumerate() {
                        let off = r * c;
                        let dot: f64 = (0..c).map(|j| g[off + j] * y[off + j]).sum();
                        for j in 0..c {
                            dx[off + j] += (g[off + j] - y[off + j] * dot) / n;
                        }
                    }
                });
            }
        }
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |a − n| / max(1e-8, |a| + |n|)` over every checked coordinate.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn finite_difference_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> FdReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for p in 0..params.len() {
        for idx in 0..params[p].len() {
            let orig = params[p].data()[idx];
            work[p].data_mut()[idx] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[idx] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((p, idx));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}

/// Gradient check of a scalar function recorded on a tape.
///
/// `build` receives one leaf per entry of `params` and must return a scalar.
pub fn check_tape_gradients<F>(build: F, params: &[Tensor], h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| Tensor::new(p.shape().to_vec(), tape.grad(v).unwrap().to_vec()))
        .collect::<Result<_>>()?;

    let mut failure = None;
    let report = finite_difference_check(
        |ps| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
            match build(&mut t, &vs) {
                Ok(l) => t.value(l).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        params,
        &analytic,
        h,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
