//! Brute-force reference implementations in `f64`, written as plain loops
//! straight from the formulas and sharing no code with the library.

#![allow(dead_code)]

use dualvc::hpc::{ApcHead, CpcTerm, CpcHead};
use dualvc::layers::GruLayer;
use dualvc::numerics::{ParamStore, Rng, Tensor};

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn mat(store: &ParamStore, id: dualvc::numerics::ParamId) -> Vec<Vec<f64>> {
    rows(store.get(id))
}

fn vec1(store: &ParamStore, id: dualvc::numerics::ParamId) -> Vec<f64> {
    store.get(id).data().iter().map(|&v| v as f64).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `r = σ(x·W_r + h·U_r + b)`, `z = σ(…)`, `n = tanh(x·W_n + b_in + r⊙(h·U_n + b_hn))`,
/// `h' = (1 − z)⊙n + z⊙h`, from `h = 0`.
pub fn gru(store: &ParamStore, layer: &GruLayer, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w_ih = mat(store, layer.w_ih);
    let w_hh = mat(store, layer.w_hh);
    let b_ih = vec1(store, layer.b_ih);
    let b_hh = vec1(store, layer.b_hh);
    let hd = layer.hidden;
    let mut h = vec![0.0; hd];
    let mut out = Vec::new();
    for xt in x {
        // Input and hidden contributions to each of the 3H gate columns.
        let mut gx = b_ih.clone();
        let mut gh = b_hh.clone();
        for col in 0..3 * hd {
            for (p, &xv) in xt.iter().enumerate() {
                gx[col] += xv * w_ih[p][col];
            }
            for (p, &hv) in h.iter().enumerate() {
                gh[col] += hv * w_hh[p][col];
            }
        }
        let mut next = vec![0.0; hd];
        for i in 0..hd {
            let r = sigmoid(gx[i] + gh[i]);
            let z = sigmoid(gx[hd + i] + gh[hd + i]);
            let n = (gx[2 * hd + i] + r * gh[2 * hd + i]).tanh();
            next[i] = (1.0 - z) * n + z * h[i];
        }
        h = next.clone();
        out.push(next);
    }
    out
}

/// Mean over the plan of `−log softmax` of the positive among
/// `[z_{t+j}, z_neg…]`, scores `z'ᵀ W_jᵀ r_t` with `W_j: [G×H]`.
pub fn cpc(store: &ParamStore, head: &CpcHead, z: &[Vec<f64>], plan: &[CpcTerm]) -> f64 {
    let r = gru(store, &head.gnet, z);
    let mut total = 0.0;
    for term in plan {
        let w = mat(store, head.score[term.j - 1]);
        let score = |k: usize| {
            let mut s = 0.0;
            for (a, row) in w.iter().enumerate() {
                for (b, &wv) in row.iter().enumerate() {
                    s += r[term.t][a] * wv * z[k][b];
                }
            }
            s
        };
        let pos = score(term.t + term.j);
        let mut denom = pos.exp();
        for &n in &term.negatives {
            denom += score(n).exp();
        }
        total += -(pos.exp() / denom).ln();
    }
    total / plan.len() as f64
}

/// Mean over `(t, j, channel)` of `|P_j(r_t) − z_{t+j}|`.
pub fn apc(store: &ParamStore, head: &ApcHead, z: &[Vec<f64>]) -> f64 {
    let r = gru(store, &head.gnet, z);
    let t_len = z.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, p) in head.predictors.iter().enumerate() {
        let j = i + 1;
        let w = mat(store, p.weight);
        let b = vec1(store, p.bias);
        for t in 0..t_len - j {
            for c in 0..b.len() {
                let mut pred = b[c];
                for (a, &rv) in r[t].iter().enumerate() {
                    pred += rv * w[a][c];
                }
                sum += (pred - z[t + j][c]).abs();
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Mean of squared differences.
pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s / a.len() as f64
}

pub fn random(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (std * rng.standard_normal()) as f32).collect();
    Tensor::new(shape, data).unwrap()
}
