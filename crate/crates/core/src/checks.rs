//! Finite-difference suite over every layer and loss.
//!
//! Each case builds a small instance in `f64`, treats its parameters and
//! inputs as the checked coordinates, and reduces the output to a scalar
//! with fixed random weights (a plain sum would hide gradients that sum to
//! zero, e.g. through layer normalisation). Dropout is off; every other
//! random draw is reseeded per evaluation so the function is deterministic.

use crate::encoder::{distillation_loss, Latent};
use crate::error::Result;
use crate::hpc::{ApcHead, CpcHead, HpcConfig};
use crate::layers::{
    BasicConvLayer, Conv1dParams, DepthwiseConv, DualModeConvBlock, GruLayer, Highway, LayerNormParams, Linear, Mode,
    Session,
};
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check_with, Graph, ParamId, ParamStore, Rng, Tensor, Var, DEFAULT_EPS};
use crate::training::{loss_graph, reconstruction_loss, LossWeights};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of perturbed coordinates.
    pub coordinates: usize,
    /// Parameter name or `input{i}`, element index, analytic and numeric
    /// derivative at the worst coordinate.
    pub worst: (String, usize, f64, f64),
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| std * rng.standard_normal()).collect())
}

/// Casts to `f64` and jitters every parameter so zero biases and unit
/// gains do not sit on special points.
fn jittered(store: &ParamStore, rng: &mut Rng) -> ParamStore<f64> {
    let mut p = store.cast::<f64>();
    let ids: Vec<ParamId> = p.ids().collect();
    for id in ids {
        let t = p.get(id);
        let j = random(rng, t.shape(), 0.1);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().zip(j.data()).map(|(a, b)| a + b).collect());
        p.set(id, v).expect("same shape");
    }
    p
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn weighted_sum(s: &mut Session<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = s.graph.shape(out).to_vec();
    let r = random(&mut Rng::new(seed), &shape, 1.0);
    let r = s.graph.constant(r);
    let p = s.graph.mul(out, r)?;
    Ok(s.graph.sum(p))
}

/// Runs the checker with `params` (every tensor of `store`) and `inputs`
/// as coordinates. `f` receives the input leaves.
fn check<F>(name: &str, store: &ParamStore, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    check_with(name, store, inputs, seed, DEFAULT_EPS, false, f)
}

fn check_with<F>(
    name: &str,
    store: &ParamStore,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    eps: f64,
    extrapolate: bool,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let p64 = jittered(store, &mut rng);
    let ids: Vec<ParamId> = p64.ids().collect();
    let mut all: Vec<Tensor<f64>> = ids.iter().map(|&id| p64.get(id).clone()).collect();
    all.extend(inputs);
    let coordinates = all.iter().map(Tensor::len).sum();
    let rep = grad_check_with(
        |g: &mut Graph<f64>, vars: &[Var]| {
            let mut s = Session::new(&p64, false, Rng::new(seed ^ 0x5eed));
            s.graph = std::mem::take(g);
            for (&id, &v) in ids.iter().zip(vars) {
                s.graph.bind_param(id, v);
            }
            let out = f(&mut s, &vars[ids.len()..]);
            *g = s.graph;
            out
        },
        &all,
        eps,
        extrapolate,
    )?;
    let (i, j) = rep.worst;
    let at = match ids.get(i) {
        Some(&id) => p64.name(id).to_string(),
        None => format!("input{}", i - ids.len()),
    };
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: rep.max_rel_error,
        coordinates,
        worst: (at, j, rep.analytic, rep.numeric),
    })
}

const T: usize = 7;

fn layer_cases(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::new(1);
    for causal in [true, false] {
        let tag = if causal { "causal" } else { "non-causal" };

        let mut st = ParamStore::new();
        let conv = Conv1dParams::register(&mut st, &mut rng, "c", 2, 3, 3, causal);
        let x = random(&mut rng, &[T, 2], 1.0);
        out.push(check(&format!("conv1d ({tag})"), &st, vec![x], 11, |s, v| {
            let y = conv.forward(s, v[0])?;
            weighted_sum(s, y, 1)
        })?);

        let mut st = ParamStore::new();
        let dw = DepthwiseConv::register(&mut st, &mut rng, "d", 3, 4, causal);
        let x = random(&mut rng, &[T, 3], 1.0);
        out.push(check(&format!("depthwise conv ({tag})"), &st, vec![x], 12, |s, v| {
            let y = dw.forward(s, v[0])?;
            weighted_sum(s, y, 2)
        })?);

        let mut st = ParamStore::new();
        let basic = BasicConvLayer::register(&mut st, &mut rng, "b", 2, 3, 3, 3, causal, 0.0)?;
        let x = random(&mut rng, &[T, 2], 1.0);
        out.push(check(&format!("basic conv layer ({tag})"), &st, vec![x], 13, |s, v| {
            let y = basic.forward(s, v[0])?;
            weighted_sum(s, y, 3)
        })?);

        let x = random(&mut rng, &[T, 3], 1.0);
        out.push(check(&format!("max-pool ({tag})"), &ParamStore::new(), vec![x], 14, |s, v| {
            let y = s.graph.max_pool2(v[0], causal)?;
            weighted_sum(s, y, 4)
        })?);
    }

    let mut st = ParamStore::new();
    let dual = DualModeConvBlock::register(&mut st, &mut rng, "dual", 2, 3, 2, 3, 0.0)?;
    for mode in Mode::BOTH {
        let x = random(&mut rng, &[T, 2], 1.0);
        out.push(check(&format!("dual-mode conv block ({mode})"), &st, vec![x], 15, |s, v| {
            let y = dual.forward(s, v[0], mode)?;
            weighted_sum(s, y, 5)
        })?);
    }

    let mut st = ParamStore::new();
    let gru = GruLayer::register(&mut st, &mut rng, "g", 3, 4);
    let x = random(&mut rng, &[T, 3], 1.0);
    let h0 = random(&mut rng, &[1, 4], 0.5);
    out.push(check("gru", &st, vec![x, h0], 16, |s, v| {
        let y = gru.forward(s, v[0], Some(v[1]))?;
        weighted_sum(s, y, 6)
    })?);

    let mut st = ParamStore::new();
    let lin = Linear::register(&mut st, &mut rng, "l", 3, 4);
    let x = random(&mut rng, &[T, 3], 1.0);
    out.push(check("linear", &st, vec![x], 17, |s, v| {
        let y = lin.forward(s, v[0])?;
        weighted_sum(s, y, 7)
    })?);

    let mut st = ParamStore::new();
    let hw = Highway::register(&mut st, &mut rng, "h", 3);
    let x = random(&mut rng, &[T, 3], 1.0);
    out.push(check("highway", &st, vec![x], 18, |s, v| {
        let y = hw.forward(s, v[0])?;
        weighted_sum(s, y, 8)
    })?);

    let mut st = ParamStore::new();
    let ln = LayerNormParams::register(&mut st, "n", 4);
    let x = random(&mut rng, &[T, 4], 1.0);
    out.push(check("layer norm", &st, vec![x], 19, |s, v| {
        let y = ln.forward(s, v[0])?;
        weighted_sum(s, y, 9)
    })?);
    Ok(())
}

fn loss_cases(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::new(2);
    let empty = ParamStore::new();

    // Only the student is a coordinate: the teacher enters detached.
    let z = random(&mut rng, &[T, 4], 0.5);
    let teacher = random(&mut rng, &[T, 4], 0.5);
    out.push(check("distillation loss", &empty, vec![z], 21, |s, v| {
        let t = s.graph.constant(teacher.clone());
        distillation_loss(
            &mut s.graph,
            Latent { var: v[0], mode: Mode::Streaming },
            Latent { var: t, mode: Mode::NonStreaming },
        )
    })?);

    let cfg = HpcConfig {
        m: 2,
        n_neg: 3,
        gnet_hidden: 3,
        ..HpcConfig::default()
    };
    let mut st = ParamStore::new();
    let cpc = CpcHead::register(&mut st, &mut rng, "cpc", 4, &cfg);
    let z = random(&mut rng, &[T, 4], 1.0);
    out.push(check("cpc loss", &st, vec![z], 25, |s, v| {
        let mut r = Rng::new(99);
        cpc.loss(s, v[0], cfg.n_neg, &mut r)
    })?);

    let mut st = ParamStore::new();
    let apc = ApcHead::register(&mut st, &mut rng, "apc", 4, &cfg);
    for detach in [true, false] {
        let z = random(&mut rng, &[T, 4], 1.0);
        let name = if detach { "apc loss (detached targets)" } else { "apc loss" };
        out.push(check(name, &st, vec![z], 26, |s, v| apc.loss(s, v[0], detach))?);
    }

    let y = random(&mut rng, &[T, 3], 1.0);
    let y_hat = random(&mut rng, &[T, 3], 1.0);
    out.push(check("reconstruction loss", &empty, vec![y, y_hat], 27, |s, v| {
        reconstruction_loss(&mut s.graph, v[0], v[1])
    })?);

    out.push(composite_case(COMPOSITE_SEED, COMPOSITE_EPS, true)?);
    Ok(())
}

const COMPOSITE_SEED: u64 = 0;

/// The full model mixes layer norms over a few nearly equal channels
/// (large third derivatives) with gradients near the rounding floor of an
/// O(1) loss. A plain central difference cannot resolve both at once, so
/// this case uses a larger step with Richardson extrapolation.
const COMPOSITE_EPS: f64 = 5e-4;

/// Every parameter of a small dropout-free model under the full training
/// objective on an 8-frame utterance.
fn composite_case(seed: u64, eps: f64, extrapolate: bool) -> Result<CheckResult> {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.dropout = 0.0;
    cfg.encoder.bank_channels = 4;
    cfg.encoder.projection_channels = 6;
    cfg.decoder.dropout = 0.0;
    cfg.decoder.conv_channels = 4;
    let (model, store) = Model::new(&cfg, seed)?;
    let mut rng = Rng::new(seed);
    let x = random(&mut rng, &[8, cfg.encoder.input_dim], 1.0);
    let y = random(&mut rng, &[8, cfg.decoder.output_dim], 1.0);
    check_with("total training loss", &store, vec![], seed, eps, extrapolate, |s, _| {
        let mut hpc_rng = Rng::new(seed + 1);
        let l = loss_graph(&model, s, &x, &y, 1, &LossWeights::default(), &mut hpc_rng)?;
        Ok(l.total)
    })
}

/// Runs every case. Errors are construction failures, not check failures;
/// inspect [`CheckResult::passed`] for the verdict.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    layer_cases(&mut out)?;
    loss_cases(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let results = run_suite().unwrap();
        for r in &results {
            eprintln!("{:40} {:e} {} {:?}", r.name, r.max_rel_error, r.coordinates, r.worst);
        }
        for r in &results {
            assert!(r.passed(), "{} failed: {:e} over {} coordinates", r.name, r.max_rel_error, r.coordinates);
        }
        assert!(results.len() >= 20);
    }
}
