//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its backward rule. [`Graph::backward`] walks the nodes in
//! reverse creation order. Nodes that do not depend on any gradient-carrying
//! input are never visited. [`Graph::detach`] copies a value into a fresh
//! constant, which is how gradient flow is cut.

use std::collections::BTreeMap;

use super::kernels::{self, GruStepCache, GruWeights};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ReverseRows(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        left: usize,
        right: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        left: usize,
        right: usize,
    },
    MaxPool2 {
        x: Var,
        /// Source row for each output element, `None` when the zero pad won.
        winners: Vec<Option<usize>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<S>,
    },
    Gru {
        x: Var,
        h0: Option<Var>,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        caches: Vec<GruStepCache<S>>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SmoothL1Mean(Var, Var),
    MseMean(Var, Var),
    L1Mean(Var, Var),
    CrossEntropyFirst {
        x: Var,
        probs: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ReverseRows(_) => "reverse_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::Depthwise { .. } => "depthwise_conv1d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gru { .. } => "gru",
            Op::Pick { .. } => "pick",
            Op::SmoothL1Mean(..) => "smooth_l1_mean",
            Op::MseMean(..) => "mse_mean",
            Op::L1Mean(..) => "l1_mean",
            Op::CrossEntropyFirst { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<ParamId, Var>,
    grads: Vec<Option<Vec<S>>>,
    first_non_finite: Option<(usize, &'static str)>,
    record: Option<Trace<S>>,
    replay: Option<Trace<S>>,
    detach_count: usize,
    branch_count: usize,
}

/// Detached values and branch choices of non-smooth ops (ReLU masks,
/// max-pool winners, smooth-L1 regions, L1 signs) in call order.
///
/// A graph replaying a trace computes the same piece of a piecewise
/// function it was recorded on, with detached tensors held fixed. The
/// gradient checker uses this so finite differences measure the function
/// the backward pass differentiates, even across a kink.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace<S: Scalar = f32> {
    pub detached: Vec<Tensor<S>>,
    pub branches: Vec<Vec<u8>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn is_matrix<S: Scalar>(t: &Tensor<S>, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(format!("{op}: expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
            first_non_finite: None,
            record: None,
            replay: None,
            detach_count: 0,
            branch_count: 0,
        }
    }

    /// A graph that records its [`Trace`].
    pub fn recording() -> Self {
        Self {
            record: Some(Trace::default()),
            ..Self::new()
        }
    }

    /// A graph that replays `trace`. Entries whose shape no longer matches
    /// are ignored.
    pub fn replaying(trace: Trace<S>) -> Self {
        Self {
            replay: Some(trace),
            ..Self::new()
        }
    }

    /// The recorded trace, if this graph is recording.
    pub fn take_trace(&mut self) -> Option<Trace<S>> {
        self.record.take()
    }

    fn tracing(&self) -> bool {
        self.record.is_some() || self.replay.is_some()
    }

    /// Branch codes for the next non-smooth op: replayed if available,
    /// otherwise `natural`; recorded when recording.
    fn branches(&mut self, natural: Vec<u8>) -> Vec<u8> {
        let k = self.branch_count;
        self.branch_count += 1;
        let chosen = match self.replay.as_ref().and_then(|t| t.branches.get(k)) {
            Some(b) if b.len() == natural.len() => b.clone(),
            _ => natural,
        };
        if let Some(rec) = &mut self.record {
            rec.branches.push(chosen.clone());
        }
        chosen
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Fails with the first node whose value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// A leaf input.
    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so gradients from every use accumulate on it.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Makes `var` stand in for parameter `id`. Used by gradient checks that
    /// perturb parameters through their own leaves.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    /// Identity in the forward pass; blocks gradient propagation.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detach_count;
        self.detach_count += 1;
        let value = match self.replay.as_ref().and_then(|t| t.detached.get(k)) {
            Some(f) if f.shape() == self.shape(v) => f.clone(),
            _ => self.value(v).clone(),
        };
        if let Some(rec) = &mut self.record {
            rec.detached.push(value.clone());
        }
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = is_matrix(self.value(a), "matmul")?;
        let (k2, n) = is_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n, None);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x · w + b` for `x: [T×I]`, `w: [I×O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (t, i) = is_matrix(self.value(x), "linear")?;
        let (i2, o) = is_matrix(self.value(w), "linear")?;
        if i != i2 {
            return Err(Error::shape(format!("linear: input dim {i} vs weight rows {i2}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::shape(format!("linear: bias len {} vs {o}", self.value(b).len())));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::matmul(self.value(x).data(), t, i, self.value(w).data(), o, bias);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![t, o], out), Op::Linear { x, w, b }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        same_shape(self.value(a), self.value(b), op.name())?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if !self.tracing() {
            return self.unary(x, Op::Relu(x), kernels::relu);
        }
        let natural = self.value(x).data().iter().map(|&v| u8::from(v > S::zero())).collect();
        let codes = self.branches(natural);
        let t = self.value(x);
        let data = t.data().iter().zip(&codes).map(|(&v, &c)| if c == 1 { v } else { S::zero() }).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Joins `[T×c_i]` matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols: no inputs"))?;
        let rows = is_matrix(self.value(first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = is_matrix(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for t in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(t));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks inputs along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for t in (0..v.rows()).rev() {
            data.extend_from_slice(v.row(t));
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(x);
        debug_assert_eq!(value.cols(), c);
        self.push(value, Op::ReverseRows(x), rg)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape(format!("gather_rows: row {bad} of {}", v.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * v.cols());
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = is_matrix(self.value(x), "transpose")?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), rg))
    }

    /// Length-preserving 1-D convolution over time.
    ///
    /// `x: [T×C_in]`, `w: [C_out×C_in×k]`, `b: [C_out]`; `left + right` must
    /// equal `k − 1` zero frames of padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, left: usize, right: usize) -> Result<Var> {
        let (t, c_in) = is_matrix(self.value(x), "conv1d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(Error::shape(format!(
                "conv1d: kernel {ws:?} does not accept {c_in} input channels"
            )));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if left + right + 1 != k {
            return Err(Error::shape(format!("conv1d: padding {left}+{right} for kernel {k}")));
        }
        if self.value(b).len() != c_out {
            return Err(Error::shape("conv1d: bias length"));
        }
        let wr = kernels::conv_kernel_to_window_major(self.value(w).data(), c_out, c_in, k);
        let xp = kernels::pad_rows(self.value(x).data(), c_in, left, right);
        let out = kernels::conv_valid(&xp, c_in, &wr, k, c_out, self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![t, c_out], out),
            Op::Conv1d {
                x,
                w,
                b,
                k,
                left,
                right,
            },
            rg,
        ))
    }

    /// Channel-wise convolution: `x: [T×C]`, `w: [C×1×k]`, `b: [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, left: usize, right: usize) -> Result<Var> {
        let (t, c) = is_matrix(self.value(x), "depthwise_conv1d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[0] != c || ws[1] != 1 {
            return Err(Error::shape(format!(
                "depthwise_conv1d: kernel {ws:?} for {c} channels"
            )));
        }
        let k = ws[2];
        if left + right + 1 != k {
            return Err(Error::shape("depthwise_conv1d: padding does not match kernel"));
        }
        if self.value(b).len() != c {
            return Err(Error::shape("depthwise_conv1d: bias length"));
        }
        let wt = kernels::transpose(self.value(w).data(), c, k);
        let xp = kernels::pad_rows(self.value(x).data(), c, left, right);
        let out = kernels::depthwise_valid(&xp, c, &wt, k, self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::Depthwise {
                x,
                w,
                b,
                k,
                left,
                right,
            },
            rg,
        ))
    }

    /// Width-2 max pooling over time with stride 1. Causal windows are
    /// `{t−1, t}`, non-causal `{t, t+1}`; the missing frame at the edge is a
    /// zero. Ties go to frame `t`.
    pub fn max_pool2(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (t, c) = is_matrix(self.value(x), "max_pool2")?;
        let other = |r: usize| if causal { r.checked_sub(1) } else { (r + 1 < t).then_some(r + 1) };
        let v = self.value(x).data();
        let mut codes = vec![0u8; t * c];
        for r in 0..t {
            for ch in 0..c {
                let cur = v[r * c + ch];
                let oth = other(r).map_or(S::zero(), |o| v[o * c + ch]);
                codes[r * c + ch] = u8::from(oth > cur);
            }
        }
        if self.tracing() {
            codes = self.branches(codes);
        }
        let v = self.value(x).data();
        let mut out = vec![S::zero(); t * c];
        let mut winners = vec![None; t * c];
        for r in 0..t {
            for ch in 0..c {
                let i = r * c + ch;
                if codes[i] == 1 {
                    out[i] = other(r).map_or(S::zero(), |o| v[o * c + ch]);
                    winners[i] = other(r);
                } else {
                    out[i] = v[i];
                    winners[i] = Some(r);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::MaxPool2 { x, winners },
            rg,
        ))
    }

    /// Per-frame normalization over channels with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (t, c) = is_matrix(self.value(x), "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm: affine parameter length"));
        }
        let (y, _mean, rstd) = kernels::layer_norm(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(vec![t, c], y),
            Op::LayerNorm { x, gamma, beta, rstd },
            rg,
        ))
    }

    /// Unidirectional GRU over the rows of `x: [T×I]`, starting from `h0`
    /// (zeros when absent). Returns every hidden state, `[T×H]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru(
        &mut self,
        x: Var,
        h0: Option<Var>,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var> {
        let (t, input) = is_matrix(self.value(x), "gru")?;
        let (wi_r, three_h) = is_matrix(self.value(w_ih), "gru")?;
        let hidden = three_h / 3;
        if wi_r != input || three_h != 3 * hidden {
            return Err(Error::shape(format!(
                "gru: input weights {:?} for input dim {input}",
                self.value(w_ih).shape()
            )));
        }
        if self.value(w_hh).shape() != [hidden, three_h]
            || self.value(b_ih).len() != three_h
            || self.value(b_hh).len() != three_h
        {
            return Err(Error::shape("gru: hidden weights or biases"));
        }
        if let Some(h0) = h0 {
            if self.value(h0).len() != hidden {
                return Err(Error::shape("gru: initial state size"));
            }
        }
        let weights = GruWeights {
            w_ih: self.value(w_ih).data(),
            w_hh: self.value(w_hh).data(),
            b_ih: self.value(b_ih).data(),
            b_hh: self.value(b_hh).data(),
            input,
            hidden,
        };
        let mut h = match h0 {
            Some(h0) => self.value(h0).data().to_vec(),
            None => vec![S::zero(); hidden],
        };
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(t * hidden);
        let mut caches = Vec::with_capacity(t);
        let mut next = vec![S::zero(); hidden];
        for r in 0..t {
            let mut cache = GruStepCache::default();
            kernels::gru_cell(weights, &xs[r * input..(r + 1) * input], &h, &mut next, Some(&mut cache));
            out.extend_from_slice(&next);
            std::mem::swap(&mut h, &mut next);
            caches.push(cache);
        }
        let rg = [x, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.rg(v)) || h0.is_some_and(|h| self.rg(h));
        Ok(self.push(
            Tensor::from_parts(vec![t, hidden], out),
            Op::Gru {
                x,
                h0,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                caches,
            },
            rg,
        ))
    }

    /// Gathers elements at flat indices into a tensor of `shape`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("pick: index count does not fill shape"));
        }
        if idx.iter().any(|&i| i >= v.len()) {
            return Err(Error::shape("pick: index out of range"));
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Pick { x, idx }, rg))
    }

    /// Mean of `f(a − b, piece)` where `piece(d)` picks the branch of a
    /// piecewise `f`.
    fn reduce_pair(
        &mut self,
        a: Var,
        b: Var,
        op: Op<S>,
        piece: impl Fn(S) -> u8,
        f: impl Fn(S, u8) -> S,
    ) -> Result<Var> {
        same_shape(self.value(a), self.value(b), op.name())?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut codes: Vec<u8> = av.iter().zip(bv).map(|(&x, &y)| piece(x - y)).collect();
        if self.tracing() {
            codes = self.branches(codes);
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let sum: f64 = av.iter().zip(bv).zip(&codes).map(|((&x, &y), &c)| f(x - y, c).as_f64()).sum();
        let mean = S::of(sum / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(mean), op, rg))
    }

    /// Mean smooth-L1 (β = 1) of `a − b`.
    pub fn smooth_l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let half = S::of(0.5);
        self.reduce_pair(
            a,
            b,
            Op::SmoothL1Mean(a, b),
            |d| u8::from(d.abs() < S::one()),
            |d, c| if c == 1 { half * d * d } else { d.abs() - half },
        )
    }

    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.reduce_pair(a, b, Op::MseMean(a, b), |_| 0, |d, _| d * d)
    }

    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.reduce_pair(a, b, Op::L1Mean(a, b), |d| u8::from(d >= S::zero()), |d, c| if c == 1 { d } else { -d })
    }

    /// Mean over rows of `−log softmax(row)[0]`: the first column holds the
    /// positive logit.
    pub fn cross_entropy_first(&mut self, x: Var) -> Result<Var> {
        let (n, k) = is_matrix(self.value(x), "cross_entropy")?;
        let v = self.value(x).data();
        let mut probs = vec![S::zero(); n * k];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &v[r * k..(r + 1) * k];
            let max = row.iter().fold(S::neg_infinity(), |m, &a| m.max(a));
            let mut sum = S::zero();
            for (j, &a) in row.iter().enumerate() {
                let e = (a - max).exp();
                probs[r * k + j] = e;
                sum = sum + e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / sum;
            }
            total += sum.as_f64().ln() + (max - row[0]).as_f64();
        }
        let loss = S::of(total / n as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyFirst { x, probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(S::of(s / n)), Op::Mean(x), rg)
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a single-element `loss` and returns the
    /// gradients of every parameter bound with [`Graph::param`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                out.insert(id, g.clone());
            }
        }
        if let Some(id) = out.first_non_finite() {
            return Err(Error::NonFinite {
                op: "backward",
                node: self.params[&id].0,
            });
        }
        self.grads = grads;
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<S>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if nodes[a.0].requires_grad {
                    let bt = kernels::transpose(val(*b).data(), k, n);
                    acc(*a, kernels::matmul(g, m, n, &bt, k, None));
                }
                if nodes[b.0].requires_grad {
                    let at = kernels::transpose(val(*a).data(), m, k);
                    acc(*b, kernels::matmul(&at, k, m, g, n, None));
                }
            }
            Op::Linear { x, w, b } => {
                let (t, ii) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[1];
                if nodes[x.0].requires_grad {
                    let wt = kernels::transpose(val(*w).data(), ii, o);
                    acc(*x, kernels::matmul(g, t, o, &wt, ii, None));
                }
                if nodes[w.0].requires_grad {
                    let xt = kernels::transpose(val(*x).data(), t, ii);
                    acc(*w, kernels::matmul(&xt, ii, t, g, o, None));
                }
                if let Some(b) = b {
                    let mut db = vec![S::zero(); o];
                    for r in 0..t {
                        add_into(&mut db, &g[r * o..(r + 1) * o]);
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                acc(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (S::one() - y))
                    .collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (S::one() - y * y))
                    .collect(),
            ),
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).shape()[1];
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    acc(*p, d);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let mut d = vec![S::zero(); val(*x).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::ReverseRows(x) => {
                let c = out.cols();
                let rows = out.rows();
                let mut d = Vec::with_capacity(g.len());
                for r in (0..rows).rev() {
                    d.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                acc(*x, d);
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                let mut d = vec![S::zero(); val(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
                acc(*x, d);
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, kernels::transpose(g, c, r));
            }
            Op::Conv1d {
                x,
                w,
                b,
                k,
                left,
                right,
            } => {
                let (t, c_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let c_out = out.shape()[1];
                let k = *k;
                let span = k * c_in;
                let wr = kernels::conv_kernel_to_window_major(val(*w).data(), c_out, c_in, k);
                let xp = kernels::pad_rows(val(*x).data(), c_in, *left, *right);
                if nodes[x.0].requires_grad {
                    // window-major kernel transposed: [C_out × span]
                    let wrt = kernels::transpose(&wr, span, c_out);
                    let mut dxp = vec![S::zero(); xp.len()];
                    for r in 0..t {
                        let win = &mut dxp[r * c_in..r * c_in + span];
                        let gr = &g[r * c_out..(r + 1) * c_out];
                        for (co, &gv) in gr.iter().enumerate() {
                            let wrow = &wrt[co * span..(co + 1) * span];
                            for (d, &wv) in win.iter_mut().zip(wrow) {
                                *d = *d + gv * wv;
                            }
                        }
                    }
                    acc(*x, dxp[left * c_in..(left + t) * c_in].to_vec());
                }
                if nodes[w.0].requires_grad {
                    let mut dwr = vec![S::zero(); span * c_out];
                    for r in 0..t {
                        let win = &xp[r * c_in..r * c_in + span];
                        let gr = &g[r * c_out..(r + 1) * c_out];
                        for (p, &xv) in win.iter().enumerate() {
                            let drow = &mut dwr[p * c_out..(p + 1) * c_out];
                            for (d, &gv) in drow.iter_mut().zip(gr) {
                                *d = *d + xv * gv;
                            }
                        }
                    }
                    acc(*w, kernels::conv_kernel_from_window_major(&dwr, c_out, c_in, k));
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); c_out];
                    for r in 0..t {
                        add_into(&mut db, &g[r * c_out..(r + 1) * c_out]);
                    }
                    acc(*b, db);
                }
            }
            Op::Depthwise {
                x,
                w,
                b,
                k,
                left,
                right,
            } => {
                let (t, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let k = *k;
                let wt = kernels::transpose(val(*w).data(), c, k);
                let xp = kernels::pad_rows(val(*x).data(), c, *left, *right);
                let mut dxp = vec![S::zero(); xp.len()];
                let mut dwt = vec![S::zero(); k * c];
                let mut db = vec![S::zero(); c];
                for r in 0..t {
                    let gr = &g[r * c..(r + 1) * c];
                    add_into(&mut db, gr);
                    for j in 0..k {
                        for ch in 0..c {
                            let gv = gr[ch];
                            dxp[(r + j) * c + ch] = dxp[(r + j) * c + ch] + gv * wt[j * c + ch];
                            dwt[j * c + ch] = dwt[j * c + ch] + gv * xp[(r + j) * c + ch];
                        }
                    }
                }
                acc(*x, dxp[left * c..(left + t) * c].to_vec());
                acc(*w, kernels::transpose(&dwt, k, c));
                acc(*b, db);
            }
            Op::MaxPool2 { x, winners } => {
                let c = out.cols();
                let mut d = vec![S::zero(); val(*x).len()];
                for (e, win) in winners.iter().enumerate() {
                    if let Some(src) = win {
                        let j = src * c + e % c;
                        d[j] = d[j] + g[e];
                    }
                }
                acc(*x, d);
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let c = out.cols();
                let rows = out.rows();
                let xv = val(*x).data();
                let gam = val(*gamma).data();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dg = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let inv_c = S::one() / S::of(c as f64);
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut mean = S::zero();
                    for &v in xr {
                        mean = mean + v;
                    }
                    mean = mean * inv_c;
                    let s = rstd[r];
                    let mut sum_dxh = S::zero();
                    let mut sum_dxh_xh = S::zero();
                    for ch in 0..c {
                        let xh = (xr[ch] - mean) * s;
                        let dxh = gr[ch] * gam[ch];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                        dg[ch] = dg[ch] + gr[ch] * xh;
                        dbeta[ch] = dbeta[ch] + gr[ch];
                    }
                    for ch in 0..c {
                        let xh = (xr[ch] - mean) * s;
                        let dxh = gr[ch] * gam[ch];
                        dx[r * c + ch] = s * (dxh - sum_dxh * inv_c - xh * sum_dxh_xh * inv_c);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, dbeta);
            }
            Op::Gru {
                x,
                h0,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                caches,
            } => {
                let (t, input) = (val(*x).shape()[0], val(*x).shape()[1]);
                let hd = out.shape()[1];
                let xs = val(*x).data();
                let wih = val(*w_ih).data();
                let whh = val(*w_hh).data();
                let h_init: Vec<S> = match h0 {
                    Some(h) => val(*h).data().to_vec(),
                    None => vec![S::zero(); hd],
                };
                let mut dx = vec![S::zero(); xs.len()];
                let mut dwih = vec![S::zero(); wih.len()];
                let mut dwhh = vec![S::zero(); whh.len()];
                let mut dbih = vec![S::zero(); 3 * hd];
                let mut dbhh = vec![S::zero(); 3 * hd];
                let mut dh_next = vec![S::zero(); hd];
                let mut dgi = vec![S::zero(); 3 * hd];
                let mut dgh = vec![S::zero(); 3 * hd];
                for r in (0..t).rev() {
                    let c = &caches[r];
                    let h_prev: &[S] = if r == 0 { &h_init } else { &out.data()[(r - 1) * hd..r * hd] };
                    let mut dh_prev = vec![S::zero(); hd];
                    for i in 0..hd {
                        let dh = g[r * hd + i] + dh_next[i];
                        let (rs, zs, ns) = (c.reset[i], c.update[i], c.candidate[i]);
                        let dn = dh * (S::one() - zs);
                        let dz = dh * (h_prev[i] - ns);
                        dh_prev[i] = dh * zs;
                        let dan = dn * (S::one() - ns * ns);
                        let dr = dan * c.hidden_candidate[i];
                        let daz = dz * zs * (S::one() - zs);
                        let dar = dr * rs * (S::one() - rs);
                        dgi[i] = dar;
                        dgi[hd + i] = daz;
                        dgi[2 * hd + i] = dan;
                        dgh[i] = dar;
                        dgh[hd + i] = daz;
                        dgh[2 * hd + i] = dan * rs;
                    }
                    let xr = &xs[r * input..(r + 1) * input];
                    for (p, &xv) in xr.iter().enumerate() {
                        let row = &mut dwih[p * 3 * hd..(p + 1) * 3 * hd];
                        for (d, &gv) in row.iter_mut().zip(&dgi) {
                            *d = *d + xv * gv;
                        }
                    }
                    for (p, &hv) in h_prev.iter().enumerate() {
                        let row = &mut dwhh[p * 3 * hd..(p + 1) * 3 * hd];
                        for (d, &gv) in row.iter_mut().zip(&dgh) {
                            *d = *d + hv * gv;
                        }
                    }
                    add_into(&mut dbih, &dgi);
                    add_into(&mut dbhh, &dgh);
                    let dxr = &mut dx[r * input..(r + 1) * input];
                    for (p, d) in dxr.iter_mut().enumerate() {
                        let wrow = &wih[p * 3 * hd..(p + 1) * 3 * hd];
                        let mut s = S::zero();
                        for (&wv, &gv) in wrow.iter().zip(&dgi) {
                            s = s + wv * gv;
                        }
                        *d = s;
                    }
                    for (p, d) in dh_prev.iter_mut().enumerate() {
                        let wrow = &whh[p * 3 * hd..(p + 1) * 3 * hd];
                        let mut s = S::zero();
                        for (&wv, &gv) in wrow.iter().zip(&dgh) {
                            s = s + wv * gv;
                        }
                        *d = *d + s;
                    }
                    dh_next = dh_prev;
                }
                acc(*x, dx);
                acc(*w_ih, dwih);
                acc(*w_hh, dwhh);
                acc(*b_ih, dbih);
                acc(*b_hh, dbhh);
                if let Some(h) = h0 {
                    acc(*h, dh_next);
                }
            }
            Op::Pick { x, idx } => {
                let mut d = vec![S::zero(); val(*x).len()];
                for (&j, &gv) in idx.iter().zip(g) {
                    d[j] = d[j] + gv;
                }
                acc(*x, d);
            }
            Op::SmoothL1Mean(a, b) | Op::MseMean(a, b) | Op::L1Mean(a, b) => {
                let av = val(*a).data();
                let bv = val(*b).data();
                let scale = g[0] / S::of(av.len() as f64);
                let two = S::of(2.0);
                let op = &nodes[i].op;
                let da: Vec<S> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        let local = match op {
                            Op::SmoothL1Mean(..) => {
                                if d.abs() < S::one() {
                                    d
                                } else {
                                    d.signum()
                                }
                            }
                            Op::MseMean(..) => two * d,
                            _ => {
                                if d == S::zero() {
                                    S::zero()
                                } else {
                                    d.signum()
                                }
                            }
                        };
                        local * scale
                    })
                    .collect();
                if nodes[b.0].requires_grad {
                    acc(*b, da.iter().map(|&v| -v).collect());
                }
                acc(*a, da);
            }
            Op::CrossEntropyFirst { x, probs } => {
                let k = val(*x).shape()[1];
                let n = val(*x).shape()[0];
                let scale = g[0] / S::of(n as f64);
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let target = if j % k == 0 { S::one() } else { S::zero() };
                        (p - target) * scale
                    })
                    .collect();
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / S::of(n as f64); n]);
            }
        }
    }
}
