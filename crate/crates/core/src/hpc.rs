//! Hybrid predictive coding heads (training only): a contrastive head
//! scoring future latents against sampled negatives, and an autoregressive
//! head regressing them directly. The two losses are summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{GruLayer, Linear, Session};
use crate::layers::init_normal;
use crate::numerics::{ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Where negatives for the contrastive head are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeStrategy {
    /// Uniformly from the other frames of the same utterance.
    #[default]
    WithinUtterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpcConfig {
    /// Number of future steps predicted.
    pub m: usize,
    /// Negatives per positive.
    pub n_neg: usize,
    pub gnet_hidden: usize,
    pub apc_detach_targets: bool,
    pub negatives: NegativeStrategy,
}

impl Default for HpcConfig {
    fn default() -> Self {
        Self {
            m: 4,
            n_neg: 8,
            gnet_hidden: 32,
            apc_detach_targets: true,
            negatives: NegativeStrategy::WithinUtterance,
        }
    }
}

impl HpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n_neg == 0 || self.gnet_hidden == 0 {
            return Err(Error::Config("hpc.m, hpc.n_neg and hpc.gnet_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// `n_neg` distinct frame indices drawn uniformly from `0..t_len` without
/// `t_pos`.
pub fn sample_negatives(rng: &mut Rng, t_len: usize, t_pos: usize, n_neg: usize) -> Result<Vec<usize>> {
    if t_len <= n_neg {
        return Err(Error::Config(format!(
            "{n_neg} negatives need more than {n_neg} frames, got {t_len}"
        )));
    }
    if t_pos >= t_len {
        return Err(Error::Argument(format!("positive index {t_pos} outside 0..{t_len}")));
    }
    let mut pool: Vec<usize> = (0..t_len).filter(|&i| i != t_pos).collect();
    for i in 0..n_neg {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(n_neg);
    Ok(pool)
}

/// One contrastive term: frame `t` predicts `t + j` against `negatives`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CpcTerm {
    pub t: usize,
    pub j: usize,
    pub negatives: Vec<usize>,
}

/// Every valid `(t, j)` pair with its negatives, in the order the loss
/// consumes randomness.
pub fn cpc_plan(rng: &mut Rng, t_len: usize, m: usize, n_neg: usize) -> Result<Vec<CpcTerm>> {
    if t_len <= m + 1 {
        return Err(Error::InsufficientContext(format!(
            "contrastive loss needs more than {} frames, got {t_len}",
            m + 1
        )));
    }
    let mut plan = Vec::new();
    for j in 1..=m {
        for t in 0..t_len - j {
            let negatives = sample_negatives(rng, t_len, t + j, n_neg)?;
            plan.push(CpcTerm { t, j, negatives });
        }
    }
    Ok(plan)
}

/// Aggregating g-net plus bilinear scores `z'ᵀ W_j r_t`, stored as
/// `W_j: [G×H]`.
#[derive(Clone, Debug)]
pub struct CpcHead {
    pub gnet: GruLayer,
    pub score: Vec<ParamId>,
}

/// Aggregating g-net plus linear predictors `P_j: G → H`.
#[derive(Clone, Debug)]
pub struct ApcHead {
    pub gnet: GruLayer,
    pub predictors: Vec<Linear>,
}

impl CpcHead {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, latent: usize, cfg: &HpcConfig) -> Self {
        let gnet = GruLayer::register(store, rng, &format!("{name}.gnet"), latent, cfg.gnet_hidden);
        let std = (1.0 / (cfg.gnet_hidden * latent) as f64).sqrt();
        let score = (1..=cfg.m)
            .map(|j| store.register(format!("{name}.w{j}"), init_normal(rng, &[cfg.gnet_hidden, latent], std)))
            .collect();
        Self { gnet, score }
    }

    pub fn m(&self) -> usize {
        self.score.len()
    }

    /// InfoNCE averaged over every valid `(t, j)`.
    pub fn loss<S: Scalar>(&self, s: &mut Session<S>, z: Var, n_neg: usize, rng: &mut Rng) -> Result<Var> {
        let t_len = s.graph.shape(z)[0];
        let plan = cpc_plan(rng, t_len, self.m(), n_neg)?;
        let r = self.gnet.forward(s, z, None)?;
        let zt = s.graph.transpose(z)?;
        let mut blocks = Vec::with_capacity(self.m());
        for &w in &self.score {
            let w = s.param(w);
            let u = s.graph.matmul(r, w)?;
            blocks.push(s.graph.matmul(u, zt)?);
        }
        let scores = s.graph.concat_rows(&blocks)?;
        let k = n_neg + 1;
        let mut idx = Vec::with_capacity(plan.len() * k);
        for term in &plan {
            let row = ((term.j - 1) * t_len + term.t) * t_len;
            idx.push(row + term.t + term.j);
            idx.extend(term.negatives.iter().map(|&n| row + n));
        }
        let logits = s.graph.pick(scores, idx, &[plan.len(), k])?;
        s.graph.cross_entropy_first(logits)
    }
}

impl ApcHead {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, latent: usize, cfg: &HpcConfig) -> Self {
        let gnet = GruLayer::register(store, rng, &format!("{name}.gnet"), latent, cfg.gnet_hidden);
        let predictors = (1..=cfg.m)
            .map(|j| Linear::register(store, rng, &format!("{name}.p{j}"), cfg.gnet_hidden, latent))
            .collect();
        Self { gnet, predictors }
    }

    pub fn m(&self) -> usize {
        self.predictors.len()
    }

    /// Mean absolute error of `P_j(r_t)` against `z_{t+j}` over every valid
    /// `(t, j)` and channel.
    pub fn loss<S: Scalar>(&self, s: &mut Session<S>, z: Var, detach_targets: bool) -> Result<Var> {
        let t_len = s.graph.shape(z)[0];
        if t_len <= self.m() {
            return Err(Error::InsufficientContext(format!(
                "autoregressive loss needs more than {} frames, got {t_len}",
                self.m()
            )));
        }
        let r = self.gnet.forward(s, z, None)?;
        let target = if detach_targets { s.graph.detach(z) } else { z };
        let mut preds = Vec::with_capacity(self.m());
        let mut targets = Vec::with_capacity(self.m());
        for (i, p) in self.predictors.iter().enumerate() {
            let j = i + 1;
            let all = p.forward(s, r)?;
            preds.push(s.graph.slice_rows(all, 0, t_len - j)?);
            targets.push(s.graph.slice_rows(target, j, t_len - j)?);
        }
        let preds = s.graph.concat_rows(&preds)?;
        let targets = s.graph.concat_rows(&targets)?;
        s.graph.l1_mean(preds, targets)
    }
}

/// Both heads; discarded after training.
#[derive(Clone, Debug)]
pub struct HpcHeads {
    pub cfg: HpcConfig,
    pub cpc: CpcHead,
    pub apc: ApcHead,
}

/// Loss nodes of one [`HpcHeads::loss`] evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HpcLoss {
    pub cpc: Var,
    pub apc: Var,
    pub total: Var,
}

impl HpcHeads {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, latent: usize, cfg: &HpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            cpc: CpcHead::register(store, rng, &format!("{name}.cpc"), latent, cfg),
            apc: ApcHead::register(store, rng, &format!("{name}.apc"), latent, cfg),
        })
    }

    pub fn loss<S: Scalar>(&self, s: &mut Session<S>, z: Var, rng: &mut Rng) -> Result<HpcLoss> {
        if self.cpc.m() != self.apc.m() {
            return Err(Error::Config("contrastive and autoregressive heads disagree on m".into()));
        }
        let cpc = self.cpc.loss(s, z, self.cfg.n_neg, rng)?;
        let apc = self.apc.loss(s, z, self.cfg.apc_detach_targets)?;
        let total = s.graph.add(cpc, apc)?;
        Ok(HpcLoss { cpc, apc, total })
    }
}

/// Value of [`CpcHead::loss`] on a fixed latent `[T×H]`.
pub fn cpc_loss<S: Scalar>(
    params: &ParamStore<S>,
    head: &CpcHead,
    z: &Tensor<S>,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<S> {
    let mut s = Session::new(params, false, Rng::new(0));
    let zv = s.input(z.clone());
    let l = head.loss(&mut s, zv, n_neg, rng)?;
    Ok(s.graph.value(l).item())
}

/// Value of [`ApcHead::loss`] on a fixed latent `[T×H]`.
pub fn apc_loss<S: Scalar>(params: &ParamStore<S>, head: &ApcHead, z: &Tensor<S>) -> Result<S> {
    let mut s = Session::new(params, false, Rng::new(0));
    let zv = s.input(z.clone());
    let l = head.loss(&mut s, zv, true)?;
    Ok(s.graph.value(l).item())
}
