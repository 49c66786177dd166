//! Neural layers.
//!
//! Each layer is a set of [`ParamId`]s plus static shape information; the
//! weights live in a [`ParamStore`]. Layers expose two forward paths:
//! a graph path used for training and whole-utterance inference, and an
//! incremental path (`*_chunk`) used by the streaming engine. Both call the
//! same kernels in the same order.

mod conv;
mod dense;
mod recurrent;

use serde::{Deserialize, Serialize};

pub use conv::{
    padding_for, BasicConvLayer, BasicConvState, ContextRing, Conv1dParams, DepthwiseConv,
    DualModeConvBlock,
};
pub use dense::{Highway, LayerNormParams, Linear};
pub use recurrent::GruLayer;

use crate::numerics::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Which parameter set a dual-mode block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Causal branches only; no access to future frames.
    Streaming,
    /// Non-causal branches; sees the whole utterance.
    NonStreaming,
}

impl Mode {
    pub fn is_causal(self) -> bool {
        matches!(self, Mode::Streaming)
    }

    pub const BOTH: [Mode; 2] = [Mode::NonStreaming, Mode::Streaming];
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Streaming => "streaming",
            Mode::NonStreaming => "non-streaming",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "streaming" => Ok(Mode::Streaming),
            "non-streaming" => Ok(Mode::NonStreaming),
            other => Err(crate::Error::Argument(format!(
                "unknown mode `{other}` (expected streaming or non-streaming)"
            ))),
        }
    }
}

/// A graph under construction together with the parameters it reads.
///
/// `training` enables dropout; `rng` supplies dropout masks and any other
/// randomness drawn while the graph is built.
pub struct Session<'a, S: Scalar = f32> {
    pub graph: Graph<S>,
    pub params: &'a ParamStore<S>,
    pub training: bool,
    pub rng: Rng,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(params: &'a ParamStore<S>, training: bool, rng: Rng) -> Self {
        Self {
            graph: Graph::new(),
            params,
            training,
            rng,
        }
    }

    /// Inference session: no dropout, no randomness consumed.
    pub fn inference(params: &'a ParamStore<S>) -> Self {
        Self::new(params, false, Rng::new(0))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.graph.constant(t)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors. Identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f32) -> crate::Result<Var> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = S::of(1.0 / (1.0 - rate as f64));
        let mask: Vec<S> = (0..n)
            .map(|_| if self.rng.uniform() < rate as f64 { S::zero() } else { keep })
            .collect();
        let mask = self.graph.constant(Tensor::from_parts(shape, mask));
        self.graph.mul(x, mask)
    }
}

/// Gaussian weight initialisation with the given standard deviation.
pub(crate) fn init_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (std * rng.standard_normal()) as f32).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn init_uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.uniform_range(-bound, bound) as f32)
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
