//! Slice-level compute kernels shared by the autodiff graph and the
//! incremental (streaming) inference path.
//!
//! Every kernel computes each output row from its own input window with a
//! fixed accumulation order that does not depend on how many rows are
//! processed at once. This is what makes chunked inference bit-identical to
//! whole-sequence inference.

use super::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out_row = init + x_row · w` where `w` is `[x_row.len() × out_row.len()]`.
#[inline]
fn accumulate_row<S: Scalar>(x_row: &[S], w: &[S], out_row: &mut [S]) {
    let n = out_row.len();
    for (p, &xv) in x_row.iter().enumerate() {
        let w_row = &w[p * n..(p + 1) * n];
        for (o, &wv) in out_row.iter_mut().zip(w_row) {
            *o = *o + xv * wv;
        }
    }
}

/// `[m×k] · [k×n] (+ bias)`.
pub fn matmul<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, bias: Option<&[S]>) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        if let Some(bias) = bias {
            row.copy_from_slice(bias);
        }
        accumulate_row(&a[i * k..(i + 1) * k], b, row);
    }
    out
}

/// Transpose of a row-major `[rows×cols]` matrix.
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Pads `[rows×c]` with zero rows on both sides.
pub fn pad_rows<S: Scalar>(x: &[S], c: usize, left: usize, right: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len() + (left + right) * c];
    out[left * c..left * c + x.len()].copy_from_slice(x);
    out
}

/// Reorders a `[C_out×C_in×k]` kernel into `[k×C_in×C_out]` so that one
/// output frame is a single row-times-matrix product over its flattened
/// input window.
pub fn conv_kernel_to_window_major<S: Scalar>(w: &[S], c_out: usize, c_in: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k {
                out[(j * c_in + ci) * c_out + co] = w[(co * c_in + ci) * k + j];
            }
        }
    }
    out
}

/// Inverse of [`conv_kernel_to_window_major`].
pub fn conv_kernel_from_window_major<S: Scalar>(w: &[S], c_out: usize, c_in: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k {
                out[(co * c_in + ci) * k + j] = w[(j * c_in + ci) * c_out + co];
            }
        }
    }
    out
}

/// Valid (unpadded) convolution of a pre-padded `[rows×c_in]` input with a
/// window-major kernel. Produces `rows - k + 1` frames.
pub fn conv_valid<S: Scalar>(
    x: &[S],
    c_in: usize,
    w_window_major: &[S],
    k: usize,
    c_out: usize,
    bias: &[S],
) -> Vec<S> {
    let rows = x.len() / c_in;
    debug_assert!(rows >= k);
    let out_rows = rows + 1 - k;
    let span = k * c_in;
    let mut out = vec![S::zero(); out_rows * c_out];
    for t in 0..out_rows {
        let row = &mut out[t * c_out..(t + 1) * c_out];
        row.copy_from_slice(bias);
        accumulate_row(&x[t * c_in..t * c_in + span], w_window_major, row);
    }
    out
}

/// Valid depthwise convolution. `w_tap_major` is `[k×c]` (tap-major).
pub fn depthwise_valid<S: Scalar>(x: &[S], c: usize, w_tap_major: &[S], k: usize, bias: &[S]) -> Vec<S> {
    let rows = x.len() / c;
    debug_assert!(rows >= k);
    let out_rows = rows + 1 - k;
    let mut out = vec![S::zero(); out_rows * c];
    for t in 0..out_rows {
        let row = &mut out[t * c..(t + 1) * c];
        row.copy_from_slice(bias);
        for j in 0..k {
            let xr = &x[(t + j) * c..(t + j + 1) * c];
            let wr = &w_tap_major[j * c..(j + 1) * c];
            for ((o, &xv), &wv) in row.iter_mut().zip(xr).zip(wr) {
                *o = *o + wv * xv;
            }
        }
    }
    out
}

/// Per-frame layer normalization. Returns `(y, mean, rstd)` per row.
pub fn layer_norm<S: Scalar>(x: &[S], c: usize, gamma: &[S], beta: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / c;
    let inv_c = S::one() / S::of(c as f64);
    let eps = S::of(LAYER_NORM_EPS);
    let mut y = vec![S::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for t in 0..rows {
        let xr = &x[t * c..(t + 1) * c];
        let mut sum = S::zero();
        for &v in xr {
            sum = sum + v;
        }
        let mean = sum * inv_c;
        let mut sq = S::zero();
        for &v in xr {
            let d = v - mean;
            sq = sq + d * d;
        }
        let rstd = S::one() / (sq * inv_c + eps).sqrt();
        let yr = &mut y[t * c..(t + 1) * c];
        for i in 0..c {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn relu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::zero()
    }
}

/// Borrowed GRU parameters. Gate blocks are ordered `[reset | update | new]`.
#[derive(Clone, Copy)]
pub struct GruWeights<'a, S> {
    /// `[input × 3H]`
    pub w_ih: &'a [S],
    /// `[H × 3H]`
    pub w_hh: &'a [S],
    pub b_ih: &'a [S],
    pub b_hh: &'a [S],
    pub input: usize,
    pub hidden: usize,
}

/// Intermediate gate values of one GRU step, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct GruStepCache<S> {
    pub reset: Vec<S>,
    pub update: Vec<S>,
    pub candidate: Vec<S>,
    /// Hidden-side pre-activation of the candidate gate, `W_hn h + b_hn`.
    pub hidden_candidate: Vec<S>,
}

/// One GRU step:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell<S: Scalar>(
    w: GruWeights<'_, S>,
    x: &[S],
    h: &[S],
    h_out: &mut [S],
    cache: Option<&mut GruStepCache<S>>,
) {
    let hd = w.hidden;
    let mut gi = w.b_ih.to_vec();
    accumulate_row(x, w.w_ih, &mut gi);
    let mut gh = w.b_hh.to_vec();
    accumulate_row(h, w.w_hh, &mut gh);

    let mut reset = vec![S::zero(); hd];
    let mut update = vec![S::zero(); hd];
    let mut cand = vec![S::zero(); hd];
    for i in 0..hd {
        reset[i] = sigmoid(gi[i] + gh[i]);
        update[i] = sigmoid(gi[hd + i] + gh[hd + i]);
        cand[i] = (gi[2 * hd + i] + reset[i] * gh[2 * hd + i]).tanh();
        h_out[i] = (S::one() - update[i]) * cand[i] + update[i] * h[i];
    }
    if let Some(c) = cache {
        c.reset = reset;
        c.update = update;
        c.candidate = cand;
        c.hidden_candidate = gh[2 * hd..].to_vec();
    }
}
