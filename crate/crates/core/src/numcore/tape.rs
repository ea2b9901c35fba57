//! Reverse-mode tape.
//!
//! Every forward op appends one node holding its output value plus whatever
//! it needs for its backward rule. `backward` walks the nodes once in reverse
//! insertion order, which is a valid reverse topological order because an
//! op can only reference nodes that already exist.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl<F: Real> BatchNormStats<F> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![F::zero(); features],
            var: vec![F::one(); features],
        }
    }
}

enum Op<F> {
    Input,
    Param(usize),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Conv1d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    SumSquares(Var),
    Sum(Var),
    Add(Var, Var),
    Scale(Var, F),
    External {
        x: Var,
        grad: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a parameter leaf; `slot` is its index in the slice later
    /// handed to [`Tape::backward`].
    pub fn param(&mut self, slot: usize, p: &Parameter<F>) -> Var {
        self.push(p.value.clone(), Op::Param(slot))
    }

    /// `y = x·W + b` for `x: B×n`, `W: n×m`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, n) = xv.dims2("linear")?;
        let (n2, m) = wv.dims2("linear")?;
        if n != n2 || bv.len() != m {
            return Err(mismatch("linear", xv.shape(), wv.shape()));
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![F::zero(); rows * m];
        for r in 0..rows {
            let o = &mut out[r * m..(r + 1) * m];
            o.copy_from_slice(bd);
            for i in 0..n {
                let xi = xd[r * n + i];
                if xi == F::zero() {
                    continue;
                }
                let wrow = &wd[i * m..(i + 1) * m];
                for (oj, &wj) in o.iter_mut().zip(wrow) {
                    *oj += xi * wj;
                }
            }
        }
        let value = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// `y = a·bᵀ` for `a: n×d`, `b: m×d`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = av.dims2("matmul_t")?;
        let (m, d2) = bv.dims2("matmul_t")?;
        if d != d2 {
            return Err(mismatch("matmul_t", av.shape(), bv.shape()));
        }
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let ar = av.row(i);
            for j in 0..m {
                out[i * m + j] = dot(ar, bv.row(j));
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMulT { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Cross-correlation of `x: C_in×T` with `k: C_out×C_in×width`, no padding.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let (c_in, t) = xv.dims2("conv1d")?;
        let &[c_out, c_in2, width] = kv.shape() else {
            return Err(mismatch("conv1d", kv.shape(), &[0, c_in, 0]));
        };
        if c_in != c_in2 || bv.len() != c_out {
            return Err(mismatch("conv1d", xv.shape(), kv.shape()));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv1d stride must be positive".into()));
        }
        if t < width {
            return Err(Error::Geometry(format!(
                "conv1d input length {t} shorter than kernel {width}"
            )));
        }
        let t_out = (t - width) / stride + 1;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![F::zero(); c_out * t_out];
        for o in 0..c_out {
            for p in 0..t_out {
                let mut acc = bd[o];
                for c in 0..c_in {
                    let krow = &kd[(o * c_in + c) * width..(o * c_in + c + 1) * width];
                    let xrow = &xd[c * t + p * stride..c * t + p * stride + width];
                    acc += dot(krow, xrow);
                }
                out[o * t_out + p] = acc;
            }
        }
        let value = Tensor::new(vec![c_out, t_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, k, b, stride }))
    }

    /// Per-channel sliding max over `x: C×T`. Ties resolve to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, t) = xv.dims2("maxpool1d")?;
        if window == 0 || stride == 0 {
            return Err(Error::Geometry("maxpool window and stride must be positive".into()));
        }
        if t < window {
            return Err(Error::Geometry(format!(
                "maxpool input length {t} shorter than window {window}"
            )));
        }
        let t_out = (t - window) / stride + 1;
        let xd = xv.data();
        let mut out = Vec::with_capacity(c * t_out);
        let mut argmax = Vec::with_capacity(c * t_out);
        for ch in 0..c {
            for p in 0..t_out {
                let start = ch * t + p * stride;
                let mut best = start;
                for i in start + 1..start + window {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![c, t_out], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(value, Op::Relu(x))
    }

    /// Per-feature batch normalisation of `x: B×m`.
    ///
    /// Train mode normalises with batch statistics and folds them into
    /// `stats`; infer mode uses `stats` as-is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut BatchNormStats<F>,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, m) = xv.dims2("batchnorm")?;
        if gv.len() != m || bv.len() != m || stats.mean.len() != m {
            return Err(mismatch("batchnorm", xv.shape(), gv.shape()));
        }
        let eps = F::lit(BN_EPS);
        let xd = xv.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::BatchSize {
                        op: "batchnorm",
                        got: rows,
                    });
                }
                let nb = F::lit(rows as f64);
                let mut mean = vec![F::zero(); m];
                let mut var = vec![F::zero(); m];
                for r in 0..rows {
                    for j in 0..m {
                        mean[j] += xd[r * m + j];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= nb);
                for r in 0..rows {
                    for j in 0..m {
                        let d = xd[r * m + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nb);
                let mom = F::lit(BN_MOMENTUM);
                for j in 0..m {
                    stats.mean[j] = mom * stats.mean[j] + (F::one() - mom) * mean[j];
                    stats.var[j] = mom * stats.var[j] + (F::one() - mom) * var[j];
                }
                (mean, var)
            }
            Mode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (gv.data(), bv.data());
        let mut xhat = vec![F::zero(); rows * m];
        let mut out = vec![F::zero(); rows * m];
        for r in 0..rows {
            for j in 0..m {
                let h = (xd[r * m + j] - mean[j]) * inv_std[j];
                xhat[r * m + j] = h;
                out[r * m + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract("concat needs parts and axis 0 or 1".into()));
        }
        let (r0, c0) = self.value(parts[0]).dims2("concat")?;
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(mismatch("concat", &[r0, c0], &[r, c]));
            }
            rows += r;
            cols += c;
        }
        let (rows, cols) = if axis == 0 { (rows, c0) } else { (r0, cols) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
        } else {
            for r in 0..rows {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(r));
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Scales every row of `x` to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2("normalize_rows")?;
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let n = dot(row, row).sqrt();
            if n > F::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::NormalizeRows { x, norms }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_squares());
        self.push(value, Op::SumSquares(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(value, Op::Sum(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed
    /// outside the tape (fused loss kernels).
    pub fn external(&mut self, x: Var, value: F, grad: Tensor<F>) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(mismatch("external", grad.shape(), self.value(x).shape()));
        }
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }))
    }

    /// Accumulates `∂loss/∂p` into `params[slot].grad` for every parameter
    /// leaf recorded on the tape.
    pub fn backward(&self, loss: Var, params: &mut [Parameter<F>]) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    let p = params.get_mut(*slot).ok_or_else(|| {
                        Error::Contract(format!("no parameter in slot {slot}"))
                    })?;
                    if p.grad.len() != g.len() {
                        return Err(mismatch("backward", p.grad.shape(), node.value.shape()));
                    }
                    for (pg, gi) in p.grad.data_mut().iter_mut().zip(&g) {
                        *pg += *gi;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, n) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[1];
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut dx = vec![F::zero(); rows * n];
                    let mut dw = vec![F::zero(); n * m];
                    let mut db = vec![F::zero(); m];
                    for r in 0..rows {
                        let gr = &g[r * m..(r + 1) * m];
                        for (j, &gj) in gr.iter().enumerate() {
                            db[j] += gj;
                        }
                        for i in 0..n {
                            dx[r * n + i] = dot(gr, &wd[i * m..(i + 1) * m]);
                            let xi = xd[r * n + i];
                            for (dwj, &gj) in dw[i * m..(i + 1) * m].iter_mut().zip(gr) {
                                *dwj += xi * gj;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, d) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[0];
                    let mut da = vec![F::zero(); n * d];
                    let mut db = vec![F::zero(); m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == F::zero() {
                                continue;
                            }
                            axpy(&mut da[i * d..(i + 1) * d], gij, bv.row(j));
                            axpy(&mut db[j * d..(j + 1) * d], gij, av.row(i));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(x) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?.transpose2()?;
                    accumulate(&mut grads, *x, gt.into_data());
                }
                Op::Conv1d { x, k, b, stride } => {
                    let (xv, kv) = (self.value(*x), self.value(*k));
                    let (c_in, t) = (xv.shape()[0], xv.shape()[1]);
                    let (c_out, width) = (kv.shape()[0], kv.shape()[2]);
                    let t_out = node.value.shape()[1];
                    let (xd, kd) = (xv.data(), kv.data());
                    let mut dx = vec![F::zero(); c_in * t];
                    let mut dk = vec![F::zero(); kd.len()];
                    let mut db = vec![F::zero(); c_out];
                    for o in 0..c_out {
                        for p in 0..t_out {
                            let gy = g[o * t_out + p];
                            if gy == F::zero() {
                                continue;
                            }
                            db[o] += gy;
                            for c in 0..c_in {
                                let kbase = (o * c_in + c) * width;
                                let xbase = c * t + p * stride;
                                for j in 0..width {
                                    dx[xbase + j] += kd[kbase + j] * gy;
                                    dk[kbase + j] += xd[xbase + j] * gy;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![F::zero(); self.value(*x).len()];
                    for (&src, &gi) in argmax.iter().zip(&g) {
                        dx[src] += gi;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gi)| if v > F::zero() { gi } else { F::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (rows, m) = (node.value.shape()[0], node.value.shape()[1]);
                    let gd = self.value(*gamma).data();
                    let mut dgamma = vec![F::zero(); m];
                    let mut dbeta = vec![F::zero(); m];
                    for r in 0..rows {
                        for j in 0..m {
                            dbeta[j] += g[r * m + j];
                            dgamma[j] += g[r * m + j] * xhat[r * m + j];
                        }
                    }
                    let mut dx = vec![F::zero(); rows * m];
                    if *batch_stats {
                        let nb = F::lit(rows as f64);
                        for r in 0..rows {
                            for j in 0..m {
                                let i = r * m + j;
                                dx[i] = gd[j] * inv_std[j] / nb
                                    * (nb * g[i] - dbeta[j] - xhat[i] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..m {
                                dx[r * m + j] = gd[j] * inv_std[j] * g[r * m + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Concat { parts, axis } => {
                    let cols = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                        let piece = if *axis == 0 {
                            let s = g[offset * cols..(offset + r) * cols].to_vec();
                            offset += r;
                            s
                        } else {
                            let mut s = Vec::with_capacity(r * c);
                            for row in 0..r {
                                s.extend_from_slice(
                                    &g[row * cols + offset..row * cols + offset + c],
                                );
                            }
                            offset += c;
                            s
                        };
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let cols = node.value.shape()[1];
                    let y = node.value.data();
                    let mut dx = vec![F::zero(); y.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        if n == F::zero() {
                            continue;
                        }
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let proj = dot(yr, gr);
                        for j in 0..cols {
                            dx[r * cols + j] = (gr[j] - yr[j] * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumSquares(x) => {
                    let two_g = F::lit(2.0) * g[0];
                    let dx = self.value(*x).data().iter().map(|&v| two_g * v).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; self.value(*x).len()]);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.iter().map(|&v| v * *c).collect());
                }
                Op::External { x, grad } => {
                    let dx = grad.data().iter().map(|&v| v * g[0]).collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
