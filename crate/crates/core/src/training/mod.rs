//! Joint dual-mode training.
//!
//! Every step runs each utterance through the model twice, once per mode,
//! and minimises
//!
//! ```text
//! L = L_distill + (L_hpc_s + L_hpc_ns) + (L_rec_s + L_rec_ns)
//! ```
//!
//! with teacher forcing on noisy ground-truth frames, then perturbs the
//! gradients of the autoregressive parameters before the optimizer update.

mod augment;
mod checkpoint;
mod optim;

use serde::{Deserialize, Serialize};

pub use augment::{sample_multiplier, tempo_augment, TEMPO_RANGE};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use optim::{add_gradient_noise, Adam, AdamConfig};

use crate::error::{Error, Result};
use crate::layers::{Mode, Session};
use crate::model::Model;
use crate::numerics::{Gradients, Graph, ParamStore, Rng, Scalar, Tensor, Var};

/// Mean squared error between targets and predictions.
pub fn reconstruction_loss<S: Scalar>(g: &mut Graph<S>, y: Var, y_hat: Var) -> Result<Var> {
    g.mse_mean(y, y_hat)
}

/// Value-level [`reconstruction_loss`].
pub fn reconstruction_value<S: Scalar>(y: &Tensor<S>, y_hat: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let a = g.constant(y.clone());
    let b = g.constant(y_hat.clone());
    let l = reconstruction_loss(&mut g, a, b)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub distill: f32,
    pub hpc: f32,
    pub rec: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            distill: 1.0,
            hpc: 1.0,
            rec: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training windows are random crops with a length in this range.
    pub crop_frames: [usize; 2],
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Odd steps train on tempo-augmented copies when enabled.
    pub tempo_augment: bool,
    pub tempo_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            crop_frames: [48, 64],
            optimizer: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            tempo_augment: true,
            tempo_range: TEMPO_RANGE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let [lo, hi] = self.crop_frames;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("train.crop_frames [{lo}, {hi}] is not a valid range")));
        }
        let [a, b] = self.tempo_range;
        if !(TEMPO_RANGE[0] <= a && a <= b && b <= TEMPO_RANGE[1]) {
            return Err(Error::Config(format!("train.tempo_range [{a}, {b}] must lie in [0.8, 1.5]")));
        }
        Ok(())
    }
}

/// One training utterance: input features, the speaker's own target
/// features, and the speaker id.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub targets: Tensor,
    pub speaker: usize,
}

/// Per-step losses, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_s: f32,
    pub rec_ns: f32,
    pub hpc_s: f32,
    pub hpc_ns: f32,
    pub distill: f32,
    pub total: f32,
}

impl LossBreakdown {
    fn with_total(mut self, w: &LossWeights) -> Self {
        self.total = w.distill * self.distill + w.hpc * (self.hpc_s + self.hpc_ns) + w.rec * (self.rec_s + self.rec_ns);
        self
    }

    pub const CSV_HEADER: &'static str = "step,L_rec_s,L_rec_ns,L_hpc_s,L_hpc_ns,L_distill,L_total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.rec_s, self.rec_ns, self.hpc_s, self.hpc_ns, self.distill, self.total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    /// Whether this step trained on tempo-augmented features.
    pub augmented: bool,
}

/// Loss nodes of one utterance's two-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec_s: Var,
    pub rec_ns: Var,
    pub hpc_s: Var,
    pub hpc_ns: Var,
    pub distill: Var,
    pub total: Var,
}

/// Records both forward passes and the weighted total into `s`.
pub fn loss_graph<S: Scalar>(
    model: &Model,
    s: &mut Session<S>,
    features: &Tensor<S>,
    targets: &Tensor<S>,
    speaker: usize,
    weights: &LossWeights,
    hpc_rng: &mut Rng,
) -> Result<LossVars> {
    let noise = model.cfg.decoder.ar_input_noise_std;
    let x = s.input(features.clone());
    let y = s.input(targets.clone());

    let z_hat = model.encoder.forward(s, x, Mode::NonStreaming)?;
    let y_ns = model
        .decoder
        .teacher_forced(s, z_hat.var, speaker, targets, Mode::NonStreaming, noise)?;
    let z = model.encoder.forward(s, x, Mode::Streaming)?;
    let y_s = model
        .decoder
        .teacher_forced(s, z.var, speaker, targets, Mode::Streaming, noise)?;

    let distill = crate::encoder::distillation_loss(&mut s.graph, z, z_hat)?;
    let hpc_s = model.hpc.loss(s, z.var, hpc_rng)?.total;
    let hpc_ns = model.hpc.loss(s, z_hat.var, hpc_rng)?.total;
    let rec_s = reconstruction_loss(&mut s.graph, y, y_s)?;
    let rec_ns = reconstruction_loss(&mut s.graph, y, y_ns)?;

    let g = &mut s.graph;
    let d = g.scale(distill, S::of(weights.distill as f64));
    let h = g.add(hpc_s, hpc_ns)?;
    let h = g.scale(h, S::of(weights.hpc as f64));
    let r = g.add(rec_s, rec_ns)?;
    let r = g.scale(r, S::of(weights.rec as f64));
    let total = g.add(d, h)?;
    let total = g.add(total, r)?;
    Ok(LossVars {
        rec_s,
        rec_ns,
        hpc_s,
        hpc_ns,
        distill,
        total,
    })
}

/// Builds the loss graph for one utterance and returns its parts and
/// parameter gradients.
pub fn example_gradients(
    model: &Model,
    params: &ParamStore,
    ex: &Example,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Gradients)> {
    let mut s = Session::new(params, true, rng.fork());
    let mut hpc_rng = rng.fork();
    let l = loss_graph(model, &mut s, &ex.features, &ex.targets, ex.speaker, weights, &mut hpc_rng)?;
    let v = |var| s.graph.value(var).item();
    let parts = LossBreakdown {
        rec_s: v(l.rec_s),
        rec_ns: v(l.rec_ns),
        hpc_s: v(l.hpc_s),
        hpc_ns: v(l.hpc_ns),
        distill: v(l.distill),
        total: 0.0,
    };
    let grads = s.graph.backward(l.total)?;
    Ok((parts, grads))
}

/// Owns the model, its parameters and the optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: Adam,
    rng: Rng,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, params: ParamStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Adam::new(cfg.optimizer, &params)?;
        let rng = Rng::new(cfg.seed);
        Ok(Self {
            cfg,
            model,
            params,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Draws a batch of random crops. Odd steps use tempo-augmented
    /// copies when augmentation is enabled.
    pub fn sample_batch(&mut self, data: &[Example]) -> Result<(Vec<Example>, bool)> {
        if data.is_empty() {
            return Err(Error::Argument("training data is empty".into()));
        }
        let augmented = self.cfg.tempo_augment && self.step % 2 == 1;
        let [lo, hi] = self.cfg.crop_frames;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let ex = &data[self.rng.below(data.len())];
            let (features, targets) = if augmented {
                let m = sample_multiplier(&mut self.rng, self.cfg.tempo_range);
                (tempo_augment(&ex.features, m)?, tempo_augment(&ex.targets, m)?)
            } else {
                (ex.features.clone(), ex.targets.clone())
            };
            let t = features.rows();
            let len = (lo + self.rng.below(hi - lo + 1)).min(t);
            let start = self.rng.below(t - len + 1);
            batch.push(Example {
                features: features.slice_rows(start, len)?,
                targets: targets.slice_rows(start, len)?,
                speaker: ex.speaker,
            });
        }
        Ok((batch, augmented))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut grads = Gradients::new();
        let mut sum = LossBreakdown::default();
        for ex in batch {
            let (parts, g) = example_gradients(&self.model, &self.params, ex, &self.cfg.weights, &mut self.rng)?;
            grads.accumulate(&g);
            sum.rec_s += parts.rec_s;
            sum.rec_ns += parts.rec_ns;
            sum.hpc_s += parts.hpc_s;
            sum.hpc_ns += parts.hpc_ns;
            sum.distill += parts.distill;
        }
        let n = batch.len() as f32;
        grads.scale(1.0 / n);
        let mean = LossBreakdown {
            rec_s: sum.rec_s / n,
            rec_ns: sum.rec_ns / n,
            hpc_s: sum.hpc_s / n,
            hpc_ns: sum.hpc_ns / n,
            distill: sum.distill / n,
            total: 0.0,
        }
        .with_total(&self.cfg.weights);
        if !mean.total.is_finite() {
            return Err(Error::NonFiniteParam {
                name: "L_total".into(),
                what: "loss",
            });
        }
        let ar = self.model.decoder.ar_params();
        add_gradient_noise(&mut grads, &self.params, &ar, &mut self.rng, self.model.cfg.decoder.grad_noise_std);
        self.optimizer.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(mean)
    }

    /// Samples a batch from `data` and trains on it.
    pub fn train_on(&mut self, data: &[Example]) -> Result<StepReport> {
        let (batch, augmented) = self.sample_batch(data)?;
        let step = self.step;
        let losses = self.train_step(&batch)?;
        Ok(StepReport { step, losses, augmented })
    }
}

/// Mean squared error of free-running conversion over `(features, speaker,
/// targets)` triples, averaged per element over all frames.
pub fn conversion_mse(
    model: &Model,
    params: &ParamStore,
    items: &[(&Tensor, usize, &Tensor)],
    mode: Mode,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(x, spk, y) in items {
        let y_hat = model.convert(params, x, spk, mode)?;
        for (a, b) in y.data().iter().zip(y_hat.data()) {
            sum += ((a - b) as f64).powi(2);
        }
        count += y.len();
    }
    Ok(sum / count.max(1) as f64)
}
