//! CBHG-style dual-mode encoder and the intra-model distillation loss.
//!
//! Pipeline: conv bank → width-2 max-pool → two conv projections with a
//! residual connection → highway stack → unidirectional GRU. Every
//! convolution is a [`DualModeConvBlock`]; the GRU and highways are shared
//! between modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BasicConvState, DualModeConvBlock, GruLayer, Highway, Mode, Session};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub bank_kernel_sizes: Vec<usize>,
    pub bank_channels: usize,
    pub projection_channels: usize,
    pub highway_layers: usize,
    pub gru_hidden: usize,
    pub depthwise_kernel: usize,
    pub dropout: f32,
    /// Adds a reverse-time GRU whose output is summed in non-streaming mode.
    pub bidirectional_noncausal_gru: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            bank_kernel_sizes: (1..=8).collect(),
            bank_channels: 8,
            projection_channels: 32,
            highway_layers: 4,
            gru_hidden: 32,
            depthwise_kernel: 5,
            dropout: 0.1,
            bidirectional_noncausal_gru: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("bank_channels", self.bank_channels),
            ("projection_channels", self.projection_channels),
            ("gru_hidden", self.gru_hidden),
            ("depthwise_kernel", self.depthwise_kernel),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.bank_kernel_sizes.is_empty() || self.bank_kernel_sizes.contains(&0) {
            return Err(Error::Config("encoder.bank_kernel_sizes must be non-empty and positive".into()));
        }
        let mut sorted = self.bank_kernel_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.bank_kernel_sizes.len() {
            return Err(Error::Config("encoder.bank_kernel_sizes must be distinct".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Latent sequence `[T×H]` tagged with the mode that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<S: Scalar = f32> {
    pub latent: Tensor<S>,
    pub mode: Mode,
}

/// A latent still attached to its graph.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub var: Var,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub bank: Vec<DualModeConvBlock>,
    pub proj1: DualModeConvBlock,
    pub proj2: DualModeConvBlock,
    pub highways: Vec<Highway>,
    pub gru: GruLayer,
    pub gru_reverse: Option<GruLayer>,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.input_dim;
        let bank = cfg
            .bank_kernel_sizes
            .iter()
            .map(|&k| {
                DualModeConvBlock::register(
                    store,
                    rng,
                    &format!("{name}.bank{k}"),
                    d,
                    cfg.bank_channels,
                    cfg.bank_channels,
                    k,
                    cfg.dropout,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let bank_out = cfg.bank_channels * cfg.bank_kernel_sizes.len();
        let proj1 = DualModeConvBlock::register(
            store,
            rng,
            &format!("{name}.proj1"),
            bank_out,
            cfg.projection_channels,
            cfg.projection_channels,
            cfg.depthwise_kernel,
            cfg.dropout,
        )?;
        let proj2 = DualModeConvBlock::register(
            store,
            rng,
            &format!("{name}.proj2"),
            cfg.projection_channels,
            cfg.projection_channels,
            d,
            cfg.depthwise_kernel,
            cfg.dropout,
        )?;
        let highways = (0..cfg.highway_layers)
            .map(|i| Highway::register(store, rng, &format!("{name}.highway{i}"), d))
            .collect();
        let gru = GruLayer::register(store, rng, &format!("{name}.gru"), d, cfg.gru_hidden);
        let gru_reverse = cfg
            .bidirectional_noncausal_gru
            .then(|| GruLayer::register(store, rng, &format!("{name}.gru_reverse"), d, cfg.gru_hidden));
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            proj1,
            proj2,
            highways,
            gru,
            gru_reverse,
        })
    }

    fn conv_blocks(&self) -> impl Iterator<Item = &DualModeConvBlock> {
        self.bank.iter().chain([&self.proj1, &self.proj2])
    }

    /// Parameters of every convolution branch used by `mode`.
    pub fn branch_params(&self, mode: Mode) -> Vec<ParamId> {
        self.conv_blocks().flat_map(|b| b.branch_params(mode)).collect()
    }

    /// Graph forward of `x: [T×D_in]`.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var, mode: Mode) -> Result<Latent> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::shape(format!(
                "encoder expects [T×{}] features, got {:?}",
                self.cfg.input_dim, shape
            )));
        }
        let bank = self
            .bank
            .iter()
            .map(|b| b.forward(s, x, mode))
            .collect::<Result<Vec<_>>>()?;
        let h = s.graph.concat_cols(&bank)?;
        let h = s.graph.max_pool2(h, mode.is_causal())?;
        let h = self.proj1.forward(s, h, mode)?;
        let h = self.proj2.forward(s, h, mode)?;
        let mut h = s.graph.add(h, x)?;
        for hw in &self.highways {
            h = hw.forward(s, h)?;
        }
        let mut z = self.gru.forward(s, h, None)?;
        if let (Some(rev), Mode::NonStreaming) = (&self.gru_reverse, mode) {
            let hr = s.graph.reverse_rows(h);
            let zr = rev.forward(s, hr, None)?;
            let zr = s.graph.reverse_rows(zr);
            z = s.graph.add(z, zr)?;
        }
        Ok(Latent { var: z, mode })
    }

    /// Whole-utterance encode outside of any training graph.
    pub fn encode<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        features: &Tensor<S>,
        mode: Mode,
        training: bool,
        rng: Rng,
    ) -> Result<EncoderOutput<S>> {
        let mut s = Session::new(params, training, rng);
        let x = s.input(features.clone());
        let z = self.forward(&mut s, x, mode)?;
        Ok(EncoderOutput {
            latent: s.graph.value(z.var).clone(),
            mode,
        })
    }

    pub fn new_stream_state<S: Scalar>(&self) -> EncoderStreamState<S> {
        let mode = Mode::Streaming;
        EncoderStreamState {
            bank: self.bank.iter().map(|b| b.new_state(mode)).collect(),
            pool_prev: vec![S::zero(); self.cfg.bank_channels * self.bank.len()],
            proj1: self.proj1.new_state(mode),
            proj2: self.proj2.new_state(mode),
            hidden: vec![S::zero(); self.cfg.gru_hidden],
        }
    }

    /// Streaming-mode forward over a chunk of `[c×D_in]` rows.
    pub fn forward_chunk<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        state: &mut EncoderStreamState<S>,
        x: &[S],
    ) -> Result<Vec<S>> {
        let d = self.cfg.input_dim;
        if x.is_empty() || x.len() % d != 0 {
            return Err(Error::shape(format!("encoder chunk of {} values for dim {d}", x.len())));
        }
        let rows = x.len() / d;
        let mode = Mode::Streaming;
        let outs = self
            .bank
            .iter()
            .zip(&mut state.bank)
            .map(|(b, st)| b.forward_chunk(params, mode, st, x))
            .collect::<Result<Vec<_>>>()?;
        let bc = self.cfg.bank_channels;
        let width = bc * outs.len();
        let mut h = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for o in &outs {
                h.extend_from_slice(&o[r * bc..(r + 1) * bc]);
            }
        }
        // Causal max-pool over {t−1, t}; ties keep frame t.
        for r in 0..rows {
            for c in 0..width {
                let cur = h[r * width + c];
                let prev = std::mem::replace(&mut state.pool_prev[c], cur);
                if prev > cur {
                    h[r * width + c] = prev;
                }
            }
        }
        let h = self.proj1.forward_chunk(params, mode, &mut state.proj1, &h)?;
        let h = self.proj2.forward_chunk(params, mode, &mut state.proj2, &h)?;
        let mut h: Vec<S> = h.iter().zip(x).map(|(&a, &b)| a + b).collect();
        for hw in &self.highways {
            h = hw.apply(params, &h)?;
        }
        Ok(self.gru.run_chunk(params, &h, &mut state.hidden))
    }
}

/// Carried state of the streaming encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStreamState<S: Scalar = f32> {
    pub bank: Vec<BasicConvState<S>>,
    /// Last pre-pool frame of the concatenated bank output.
    pub pool_prev: Vec<S>,
    pub proj1: BasicConvState<S>,
    pub proj2: BasicConvState<S>,
    pub hidden: Vec<S>,
}

impl<S: Scalar> EncoderStreamState<S> {
    pub fn byte_size(&self) -> usize {
        let size = std::mem::size_of::<S>();
        self.bank.iter().map(BasicConvState::byte_size).sum::<usize>()
            + self.proj1.byte_size()
            + self.proj2.byte_size()
            + (self.pool_prev.len() + self.hidden.len()) * size
    }
}

/// Mean smooth-L1 between the streaming latent and the detached
/// non-streaming latent. Only the streaming side receives gradient.
pub fn distillation_loss<S: Scalar>(g: &mut Graph<S>, z: Latent, z_hat: Latent) -> Result<Var> {
    if z.mode != Mode::Streaming || z_hat.mode != Mode::NonStreaming {
        return Err(Error::Contract(format!(
            "distillation expects (streaming, non-streaming) latents, got ({}, {})",
            z.mode, z_hat.mode
        )));
    }
    if g.shape(z.var) != g.shape(z_hat.var) {
        return Err(Error::Contract(format!(
            "distillation latents differ in shape: {:?} vs {:?}",
            g.shape(z.var),
            g.shape(z_hat.var)
        )));
    }
    let teacher = g.detach(z_hat.var);
    g.smooth_l1_mean(z.var, teacher)
}

/// Value-level form of [`distillation_loss`].
pub fn distillation_value<S: Scalar>(z: &EncoderOutput<S>, z_hat: &EncoderOutput<S>) -> Result<S> {
    let mut g = Graph::new();
    let a = g.constant(z.latent.clone());
    let b = g.constant(z_hat.latent.clone());
    let l = distillation_loss(
        &mut g,
        Latent { var: a, mode: z.mode },
        Latent { var: b, mode: z_hat.mode },
    )?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_normal;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            bank_kernel_sizes: vec![1, 2, 3],
            bank_channels: 2,
            projection_channels: 4,
            highway_layers: 2,
            gru_hidden: 5,
            depthwise_kernel: 3,
            dropout: 0.1,
            bidirectional_noncausal_gru: false,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &mut Rng::new(seed), "encoder", cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn default_shape_contract() {
        let cfg = EncoderConfig::default();
        let (store, enc) = build(&cfg, 1);
        let x = init_normal(&mut Rng::new(2), &[16, cfg.input_dim], 1.0);
        let out = enc.encode(&store, &x, Mode::Streaming, false, Rng::new(0)).unwrap();
        assert_eq!(out.latent.shape(), &[16, 32]);
        assert_eq!(out.mode, Mode::Streaming);
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let (store, enc) = build(&small_cfg(), 1);
        let x = Tensor::zeros(&[4, 7]);
        let r = enc.encode(&store, &x, Mode::NonStreaming, false, Rng::new(0));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.bank_kernel_sizes = vec![1, 2, 2];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.gru_hidden = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn streaming_prefix_property() {
        let (store, enc) = build(&small_cfg(), 3);
        let x = init_normal(&mut Rng::new(4), &[20, 3], 1.0);
        let full = enc.encode(&store, &x, Mode::Streaming, false, Rng::new(0)).unwrap().latent;
        for t in 1..=20 {
            let p = x.slice_rows(0, t).unwrap();
            let z = enc.encode(&store, &p, Mode::Streaming, false, Rng::new(0)).unwrap().latent;
            assert_eq!(z, full.slice_rows(0, t).unwrap(), "prefix {t}");
        }
    }

    #[test]
    fn nonstreaming_sees_future_streaming_does_not() {
        let (store, enc) = build(&small_cfg(), 5);
        let x = init_normal(&mut Rng::new(6), &[12, 3], 1.0);
        let mut xd = x.data().to_vec();
        xd[11 * 3] += 3.0;
        let xp = Tensor::new(&[12, 3], xd).unwrap();
        for mode in Mode::BOTH {
            let a = enc.encode(&store, &x, mode, false, Rng::new(0)).unwrap().latent;
            let b = enc.encode(&store, &xp, mode, false, Rng::new(0)).unwrap().latent;
            let early_same = a.slice_rows(0, 11).unwrap() == b.slice_rows(0, 11).unwrap();
            assert_eq!(early_same, mode.is_causal(), "{mode}");
        }
        // A perturbation at t = 0 reaches the last frame.
        let mut xd = x.data().to_vec();
        xd[0] += 3.0;
        let xp = Tensor::new(&[12, 3], xd).unwrap();
        let a = enc.encode(&store, &x, Mode::NonStreaming, false, Rng::new(0)).unwrap().latent;
        let b = enc.encode(&store, &xp, Mode::NonStreaming, false, Rng::new(0)).unwrap().latent;
        assert_ne!(a.row(11), b.row(11));
    }

    #[test]
    fn chunked_matches_offline_bitwise() {
        let (store, enc) = build(&small_cfg(), 7);
        let x = init_normal(&mut Rng::new(8), &[17, 3], 1.0);
        let full = enc.encode(&store, &x, Mode::Streaming, false, Rng::new(0)).unwrap().latent;
        for chunk in [1, 4, 5, 17] {
            let mut st = enc.new_stream_state();
            let mut out = Vec::new();
            for c in x.data().chunks(chunk * 3) {
                out.extend(enc.forward_chunk(&store, &mut st, c).unwrap());
            }
            assert_eq!(out, full.data(), "chunk {chunk}");
        }
    }

    #[test]
    fn distillation_formula() {
        let z = |v: f32, mode| EncoderOutput {
            latent: Tensor::full(&[3, 2], v),
            mode,
        };
        let s = Mode::Streaming;
        let ns = Mode::NonStreaming;
        assert_eq!(distillation_value(&z(1.0, s), &z(1.0, ns)).unwrap(), 0.0);
        assert_eq!(distillation_value(&z(0.5, s), &z(0.0, ns)).unwrap(), 0.125);
        assert_eq!(distillation_value(&z(0.0, s), &z(2.0, ns)).unwrap(), 1.5);
        assert!(matches!(distillation_value(&z(0.0, ns), &z(0.0, s)), Err(Error::Contract(_))));
        let short = EncoderOutput {
            latent: Tensor::zeros(&[2, 2]),
            mode: ns,
        };
        assert!(matches!(distillation_value(&z(0.0, s), &short), Err(Error::Contract(_))));
    }

    #[test]
    fn distillation_gradient_reaches_only_causal_branches() {
        let mut cfg = small_cfg();
        cfg.bidirectional_noncausal_gru = true;
        let (store, enc) = build(&cfg, 9);
        let x = init_normal(&mut Rng::new(10), &[10, 3], 1.0);
        let mut s = Session::new(&store, true, Rng::new(11));
        let xv = s.input(x);
        let z_hat = enc.forward(&mut s, xv, Mode::NonStreaming).unwrap();
        let z = enc.forward(&mut s, xv, Mode::Streaming).unwrap();
        let loss = distillation_loss(&mut s.graph, z, z_hat).unwrap();
        let grads = s.graph.backward(loss).unwrap();
        for id in enc.branch_params(Mode::NonStreaming) {
            assert!(grads.is_zero(id), "{}", store.name(id));
        }
        for id in enc.gru_reverse.as_ref().unwrap().params() {
            assert!(grads.is_zero(id));
        }
        assert!(enc.branch_params(Mode::Streaming).iter().any(|&id| !grads.is_zero(id)));
        let bank_kernel = enc.bank[2].causal_branch.depthwise.kernel;
        assert!(!grads.is_zero(bank_kernel));
    }

    #[test]
    fn bidirectional_flag_only_changes_nonstreaming() {
        let mut cfg = small_cfg();
        cfg.bidirectional_noncausal_gru = true;
        let (store, enc) = build(&cfg, 12);
        let x = init_normal(&mut Rng::new(13), &[8, 3], 1.0);
        let mut xd = x.data().to_vec();
        xd[7 * 3 + 1] -= 2.0;
        let xp = Tensor::new(&[8, 3], xd).unwrap();
        let a = enc.encode(&store, &x, Mode::Streaming, false, Rng::new(0)).unwrap().latent;
        let b = enc.encode(&store, &xp, Mode::Streaming, false, Rng::new(0)).unwrap().latent;
        assert_eq!(a.slice_rows(0, 7).unwrap(), b.slice_rows(0, 7).unwrap());
    }

    #[test]
    fn state_size_is_fixed() {
        let (store, enc) = build(&small_cfg(), 14);
        let mut st = enc.new_stream_state();
        let before = st.byte_size();
        let x = init_normal(&mut Rng::new(15), &[40, 3], 1.0);
        enc.forward_chunk(&store, &mut st, x.data()).unwrap();
        assert_eq!(st.byte_size(), before);
    }
}
