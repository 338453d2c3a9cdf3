//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive application in execution order, so the
//! tape is topologically sorted by construction. [`Graph::backward`] walks it
//! once in reverse and then marks the graph consumed; a second call is a usage
//! error.
//!
//! ```
//! use stpt::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0), true);
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use std::collections::HashMap;

use super::kernels::{self, LOG_FLOOR};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle of one node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Shape and masking of one fused multi-head attention call.
///
/// Queries and keys are laid out as `batch` stacked blocks of `query_len`
/// (respectively `key_len`) rows. Keys at positions `>= key_lengths[b]` are
/// excluded; with `causal`, query `i` additionally sees only keys `<= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub key_lengths: Vec<usize>,
    pub causal: bool,
}

impl AttentionSpec {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.key_lengths[b] && (!self.causal || j <= i)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Unfold {
        x: Var,
        batch: usize,
        len: usize,
        out_len: usize,
        kernel: usize,
        stride: usize,
    },
    MaskRows {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    KlDiv {
        log_q: Var,
        p: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation with reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    bound: HashMap<ParamId, Var>,
    inference: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose bound parameters do not require gradients. Forward
    /// values are identical to a training graph.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; repeated calls return the same node so every
    /// use of one parameter accumulates into a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), !self.inference);
        self.bound.insert(id, v);
        v
    }

    /// The node a parameter is bound to, if it was used in this graph.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("graph already consumed by backward".into()));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_live()?;
        let d = self.value(a).cols();
        if self.value(row).len() != d {
            return Err(Error::shape("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(d) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_live()?;
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, factor), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = kernels::gelu(self.value(a));
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax: NaN in input".into()));
        }
        let d = x.cols();
        let mut data = x.data().to_vec();
        data.chunks_mut(d).for_each(kernels::softmax_in_place);
        let shape = x.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax: NaN in input".into()));
        }
        let d = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = x.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::Contract("layer_norm needs a width of at least 2".into()));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x).data(), d);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = xhat.clone();
        for row in data.chunks_mut(d) {
            for ((v, g), b) in row.iter_mut().zip(g).zip(b) {
                *v = *v * g + b;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix (repeats allowed); embedding lookup is this
    /// applied to the table.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check_live()?;
        let (n, d) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows: empty row set".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, extent: n });
            }
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(rows.len(), d, data)?,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(x), rg))
    }

    /// Same values in row-major order under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows: no inputs".into()))?;
        let d = self.matrix_dims(first, "concat_rows")?.1;
        let mut data = Vec::new();
        for &p in parts {
            let (_, dp) = self.matrix_dims(p, "concat_rows")?;
            if dp != d {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / d;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, d, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sliding windows over time for a strided 1-D convolution.
    ///
    /// `x` holds `batch` blocks of `len` rows with `c` channels. Output row
    /// `(b, t)` concatenates input rows `t·stride .. t·stride + kernel` of
    /// block `b`, giving `batch · out_len` rows of width `kernel · c`.
    pub fn unfold(&mut self, x: Var, batch: usize, len: usize, kernel: usize, stride: usize) -> Result<Var> {
        self.check_live()?;
        let (n, c) = self.matrix_dims(x, "unfold")?;
        if n != batch * len {
            return Err(Error::shape("unfold", &[n, c], &[batch, len]));
        }
        let out_len = conv_out_len(len, kernel, stride)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * out_len * kernel * c);
        for b in 0..batch {
            for t in 0..out_len {
                let start = (b * len + t * stride) * c;
                data.extend_from_slice(&src[start..start + kernel * c]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(batch * out_len, kernel * c, data)?,
            Op::Unfold {
                x,
                batch,
                len,
                out_len,
                kernel,
                stride,
            },
            rg,
        ))
    }

    /// Replaces the rows flagged in `mask` by the vector `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        self.check_live()?;
        let (n, d) = self.matrix_dims(x, "mask_rows")?;
        if mask.len() != n || self.value(fill).len() != d {
            return Err(Error::shape("mask_rows", &[n, d], &[mask.len(), self.value(fill).len()]));
        }
        let mut data = self.value(x).data().to_vec();
        let f = self.value(fill).data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * d..(r + 1) * d].copy_from_slice(&f);
            }
        }
        let rg = self.any_grad(&[x, fill]);
        Ok(self.push(
            Tensor::matrix(n, d, data)?,
            Op::MaskRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Fused scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        self.check_live()?;
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        let (nv, dv) = self.matrix_dims(v, "attention")?;
        if d != dk || d != dv || nk != nv {
            return Err(Error::shape("attention", &[nq, d], &[nk, dk]));
        }
        if nq != spec.batch * spec.query_len || nk != spec.batch * spec.key_len {
            return Err(Error::shape("attention", &[nq, nk], &[spec.batch, spec.query_len, spec.key_len]));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Contract(format!("width {d} not divisible by {} heads", spec.heads)));
        }
        if spec.key_lengths.len() != spec.batch
            || spec.key_lengths.iter().any(|&l| l == 0 || l > spec.key_len)
        {
            return Err(Error::Contract("attention: invalid key lengths".into()));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (spec.query_len, spec.key_len);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; spec.batch * spec.heads * lq * lk];
        let mut out = vec![0.0; nq * d];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let (qo, ko) = (b * lq * d + h * dh, b * lk * d + h * dh);
                let p = &mut probs[(b * spec.heads + h) * lq * lk..][..lq * lk];
                // scores = scale · Q Kᵀ
                kernels::gemm_strided((lq, dh, lk), scale, &qd[qo..], (d, 1), &kd[ko..], (1, d), 0.0, p, (lk, 1));
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let mut max = f64::NEG_INFINITY;
                    for (j, &s) in row.iter().enumerate() {
                        if spec.visible(b, i, j) {
                            max = max.max(s);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, v) in row.iter_mut().enumerate() {
                        if spec.visible(b, i, j) {
                            *v = (*v - max).exp();
                            sum += *v;
                        } else {
                            *v = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                kernels::gemm_strided((lq, lk, dh), 1.0, p, (lk, 1), &vd[ko..], (d, 1), 0.0, &mut out[qo..], (d, 1));
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(nq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check_live()?;
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[targets.len()]));
        }
        let x = self.value(logits).data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("cross_entropy: NaN logits".into()));
        }
        let mut probs = x.to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::Index { index: t, extent: c });
                }
                total += kernels::log_sum_exp(row) - row[t];
                count += 1;
            }
            kernels::softmax_in_place(row);
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy: no targets".into()));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// `Σ_rows Σ_i p_i (log p_i − log_q_i)` against a constant distribution `p`.
    pub fn kl_divergence(&mut self, p: &Tensor, log_q: Var) -> Result<Var> {
        self.check_live()?;
        if p.shape() != self.value(log_q).shape() {
            return Err(Error::shape("kl_divergence", p.shape(), self.value(log_q).shape()));
        }
        if p.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Contract("kl_divergence: p has negative entries".into()));
        }
        let value = kernels::kl_terms(p.data(), self.value(log_q).data());
        let rg = self.any_grad(&[log_q]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDiv {
                log_q,
                p: p.data().to_vec(),
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (_, d) = self.matrix_dims(x, "normalize_rows")?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let n = kernels::dot(row, row).sqrt().max(LOG_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Reverse pass from a scalar; afterwards every node that requires a
    /// gradient has one (zeros if it does not influence `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        self.consumed = true;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter bound to this graph, keyed by store id.
    pub fn param_grads(&self, n_params: usize) -> Result<Gradients> {
        if !self.consumed {
            return Err(Error::Usage("param_grads before backward".into()));
        }
        let mut out = Gradients::empty(n_params);
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                out.set(id, g.to_vec());
            }
        }
        Ok(out)
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, kernels::mm_nt(g, val(*b), m, n, k)));
                }
                if needs(*b) {
                    out.push((*b, kernels::mm_tn(val(*a), g, m, k, n)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(a, row) => {
                let d = self.value(*row).len();
                let mut gr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*a, g.to_vec()), (*row, gr)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Gelu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| g * kernels::gelu_derivative(x))
                    .collect(),
            )],
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((gx, y), g) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let s = kernels::dot(y, g);
                    for j in 0..d {
                        gx[j] = y[j] * (g[j] - s);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((gx, y), g) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let s: f64 = g.iter().sum();
                    for j in 0..d {
                        gx[j] = g[j] - y[j].exp() * s;
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = val(*gain);
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rstd.len() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gy = &g[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        gg[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                    }
                    let s = rstd[r] / d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gv[j];
                        gx[r * d + j] = s * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::Gather { x, rows } => {
                let d = node.value.cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[k * d + j];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let slice = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, slice)
                    })
                    .collect()
            }
            Op::Unfold {
                x,
                batch,
                len,
                out_len,
                kernel,
                stride,
            } => {
                let c = self.value(*x).cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                let w = kernel * c;
                for b in 0..*batch {
                    for t in 0..*out_len {
                        let start = (b * len + t * stride) * c;
                        let grow = &g[(b * out_len + t) * w..(b * out_len + t + 1) * w];
                        for (dst, src) in gx[start..start + w].iter_mut().zip(grow) {
                            *dst += src;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::MaskRows { x, fill, mask } => {
                let d = node.value.cols();
                let mut gx = g.to_vec();
                let mut gf = vec![0.0; d];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        let row = &mut gx[r * d..(r + 1) * d];
                        gf.iter_mut().zip(row.iter()).for_each(|(a, b)| *a += b);
                        row.fill(0.0);
                    }
                }
                vec![(*x, gx), (*fill, gf)]
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => attention_backward(val(*q), val(*k), val(*v), spec, probs, g, *q, *k, *v),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = node_cols(self.value(*logits));
                let scale = g[0] / *count as f64;
                let mut gx = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..c {
                            gx[r * c + j] = probs[r * c + j] * scale;
                        }
                        gx[r * c + t] -= scale;
                    }
                }
                vec![(*logits, gx)]
            }
            Op::KlDiv { log_q, p } => vec![(*log_q, p.iter().map(|pi| -pi * g[0]).collect())],
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj = kernels::dot(yr, gr);
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
        }
    }
}

fn node_cols(t: &Tensor) -> usize {
    t.cols()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    spec: &AttentionSpec,
    probs: &[f64],
    g: &[f64],
    q: Var,
    k: Var,
    v: Var,
) -> Vec<(Var, Vec<f64>)> {
    let d = g.len() / (spec.batch * spec.query_len);
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (spec.query_len, spec.key_len);
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut ds = vec![0.0; lq * lk];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let (qo, ko) = (b * lq * d + h * dh, b * lk * d + h * dh);
            let p = &probs[(b * spec.heads + h) * lq * lk..][..lq * lk];
            // dP = dO Vᵀ
            kernels::gemm_strided((lq, dh, lk), 1.0, &g[qo..], (d, 1), &vd[ko..], (1, d), 0.0, &mut ds, (lk, 1));
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut ds[i * lk..(i + 1) * lk];
                let s = kernels::dot(pr, dr);
                for (x, &pj) in dr.iter_mut().zip(pr) {
                    *x = pj * (*x - s) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q, dV = Pᵀ dO
            kernels::gemm_strided((lq, lk, dh), 1.0, &ds, (lk, 1), &kd[ko..], (d, 1), 0.0, &mut gq[qo..], (d, 1));
            kernels::gemm_strided((lk, lq, dh), 1.0, &ds, (1, lk), &qd[qo..], (d, 1), 0.0, &mut gk[ko..], (d, 1));
            kernels::gemm_strided((lk, lq, dh), 1.0, p, (1, lk), &g[qo..], (d, 1), 0.0, &mut gv[ko..], (d, 1));
        }
    }
    vec![(q, gq), (k, gk), (v, gv)]
}

/// Output length of a strided valid convolution: `⌊(len − kernel)/stride⌋ + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Contract("kernel and stride must be positive".into()));
    }
    if len < kernel {
        return Err(Error::Length(format!(
            "input of length {len} shorter than kernel {kernel}"
        )));
    }
    Ok((len - kernel) / stride + 1)
}
