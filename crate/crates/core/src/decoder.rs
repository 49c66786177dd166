//! Autoregressive dual-mode decoder.
//!
//! The latent and the target speaker embedding pass through a stack of
//! dual-mode convolutions to form a per-frame condition. The autoregressive
//! part then runs frame by frame: a two-layer prenet on the previous output
//! frame, concatenated with the condition, feeds a GRU, and a linear layer
//! maps `[GRU state ⊕ condition]` to the next frame.
//!
//! The convolutions see only the latent and speaker streams, never the fed
//! back frames: a non-causal convolution over fed back frames would read
//! frames not yet generated at inference and the ground-truth current frame
//! under teacher forcing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_normal, BasicConvState, DualModeConvBlock, GruLayer, Linear, Mode, Session};
use crate::numerics::{kernels, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub output_dim: usize,
    pub speakers: usize,
    pub speaker_dim: usize,
    pub prenet: Vec<usize>,
    pub gru_hidden: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub depthwise_kernel: usize,
    pub dropout: f32,
    /// Std of the Gaussian noise added to teacher-forced input frames.
    pub ar_input_noise_std: f64,
    /// Std of the Gaussian noise added to the gradients of the
    /// autoregressive parameters.
    pub grad_noise_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            output_dim: 16,
            speakers: 4,
            speaker_dim: 16,
            prenet: vec![128, 64],
            gru_hidden: 64,
            conv_layers: 2,
            conv_channels: 32,
            depthwise_kernel: 5,
            dropout: 0.1,
            ar_input_noise_std: 1.0,
            grad_noise_std: 1e-3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("output_dim", self.output_dim),
            ("speakers", self.speakers),
            ("speaker_dim", self.speaker_dim),
            ("gru_hidden", self.gru_hidden),
            ("conv_channels", self.conv_channels),
            ("depthwise_kernel", self.depthwise_kernel),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("decoder.{name} must be positive")));
            }
        }
        if self.prenet.is_empty() || self.prenet.contains(&0) {
            return Err(Error::Config("decoder.prenet sizes must be non-empty and positive".into()));
        }
        for (name, v) in [
            ("ar_input_noise_std", self.ar_input_noise_std),
            ("grad_noise_std", self.grad_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("decoder.{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// One learned embedding per speaker id, `[S×E]`.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    pub embeddings: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl SpeakerTable {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, count: usize, dim: usize) -> Self {
        Self {
            embeddings: store.register(format!("{name}.embeddings"), init_normal(rng, &[count, dim], 1.0)),
            count,
            dim,
        }
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id >= self.count {
            return Err(Error::UnknownSpeaker { id, count: self.count });
        }
        Ok(())
    }

    pub fn lookup<S: Scalar>(&self, params: &ParamStore<S>, id: usize) -> Result<Tensor<S>> {
        self.check(id)?;
        Ok(Tensor::from_parts(vec![self.dim], params.get(self.embeddings).row(id).to_vec()))
    }

    /// The embedding of `id` repeated over `frames` rows.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, id: usize, frames: usize) -> Result<Var> {
        self.check(id)?;
        let table = s.param(self.embeddings);
        s.graph.gather_rows(table, &vec![id; frames])
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub latent_dim: usize,
    pub speakers: SpeakerTable,
    pub convs: Vec<DualModeConvBlock>,
    pub prenet: Vec<Linear>,
    pub gru: GruLayer,
    pub output: Linear,
}

/// Per-stream decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<S: Scalar = f32> {
    pub mode: Mode,
    pub convs: Vec<BasicConvState<S>>,
    pub hidden: Vec<S>,
    pub prev_frame: Vec<S>,
}

impl<S: Scalar> DecoderState<S> {
    pub fn byte_size(&self) -> usize {
        self.convs.iter().map(BasicConvState::byte_size).sum::<usize>()
            + (self.hidden.len() + self.prev_frame.len()) * std::mem::size_of::<S>()
    }
}

impl Decoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        latent_dim: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if latent_dim == 0 {
            return Err(Error::Config("decoder latent dimension must be positive".into()));
        }
        let speakers = SpeakerTable::register(store, rng, &format!("{name}.speakers"), cfg.speakers, cfg.speaker_dim);
        let mut c_in = latent_dim + cfg.speaker_dim;
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        for i in 0..cfg.conv_layers {
            convs.push(DualModeConvBlock::register(
                store,
                rng,
                &format!("{name}.conv{i}"),
                c_in,
                cfg.conv_channels,
                cfg.conv_channels,
                cfg.depthwise_kernel,
                cfg.dropout,
            )?);
            c_in = cfg.conv_channels;
        }
        let mut prenet = Vec::with_capacity(cfg.prenet.len());
        let mut p_in = cfg.output_dim;
        for (i, &p) in cfg.prenet.iter().enumerate() {
            prenet.push(Linear::register(store, rng, &format!("{name}.prenet{i}"), p_in, p));
            p_in = p;
        }
        let cond = Self::cond_dim_of(cfg, latent_dim);
        let gru = GruLayer::register(store, rng, &format!("{name}.gru"), p_in + cond, cfg.gru_hidden);
        let output = Linear::register(store, rng, &format!("{name}.output"), cfg.gru_hidden + cond, cfg.output_dim);
        Ok(Self {
            cfg: cfg.clone(),
            latent_dim,
            speakers,
            convs,
            prenet,
            gru,
            output,
        })
    }

    fn cond_dim_of(cfg: &DecoderConfig, latent_dim: usize) -> usize {
        let conv = if cfg.conv_layers == 0 { 0 } else { cfg.conv_channels };
        conv + latent_dim + cfg.speaker_dim
    }

    /// Width of the per-frame condition.
    pub fn cond_dim(&self) -> usize {
        Self::cond_dim_of(&self.cfg, self.latent_dim)
    }

    /// Parameters receiving gradient noise: prenet, GRU and output layer.
    pub fn ar_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.prenet.iter().flat_map(Linear::params).collect();
        ids.extend(self.gru.params());
        ids.extend(self.output.params());
        ids
    }

    pub fn branch_params(&self, mode: Mode) -> Vec<ParamId> {
        self.convs.iter().flat_map(|b| b.branch_params(mode)).collect()
    }

    fn check_latents(&self, rows: usize, cols: usize) -> Result<()> {
        if rows == 0 || cols != self.latent_dim {
            return Err(Error::shape(format!(
                "decoder expects [T×{}] latents, got [{rows}×{cols}]",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Graph condition `[conv(latent ⊕ spk) ⊕ latent ⊕ spk]`.
    pub fn condition<S: Scalar>(&self, s: &mut Session<S>, latent: Var, speaker: usize, mode: Mode) -> Result<Var> {
        let shape = s.graph.shape(latent).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("decoder latents must be a matrix"));
        }
        self.check_latents(shape[0], shape[1])?;
        let spk = self.speakers.forward(s, speaker, shape[0])?;
        let base = s.graph.concat_cols(&[latent, spk])?;
        if self.convs.is_empty() {
            return Ok(base);
        }
        let mut h = base;
        for c in &self.convs {
            h = c.forward(s, h, mode)?;
        }
        s.graph.concat_cols(&[h, base])
    }

    fn prenet_graph<S: Scalar>(&self, s: &mut Session<S>, mut x: Var) -> Result<Var> {
        for p in &self.prenet {
            let h = p.forward(s, x)?;
            x = s.graph.relu(h);
        }
        Ok(x)
    }

    /// Teacher-forced decode: the input frame at step `t` is
    /// `Y_{t−1} + noise_std·n` with `Y_{−1} = 0` and fresh noise per step and
    /// channel.
    pub fn teacher_forced<S: Scalar>(
        &self,
        s: &mut Session<S>,
        latent: Var,
        speaker: usize,
        targets: &Tensor<S>,
        mode: Mode,
        noise_std: f64,
    ) -> Result<Var> {
        let t_len = s.graph.shape(latent)[0];
        if targets.shape() != [t_len, self.cfg.output_dim] {
            return Err(Error::shape(format!(
                "targets {:?} do not match {t_len} latent frames of dim {}",
                targets.shape(),
                self.cfg.output_dim
            )));
        }
        let cond = self.condition(s, latent, speaker, mode)?;
        let d = self.cfg.output_dim;
        let mut prev = vec![S::zero(); t_len * d];
        prev[d..].copy_from_slice(&targets.data()[..(t_len - 1) * d]);
        if noise_std > 0.0 {
            for v in &mut prev {
                *v = *v + S::of(noise_std * s.rng.standard_normal());
            }
        }
        let prev = s.input(Tensor::from_parts(vec![t_len, d], prev));
        let p = self.prenet_graph(s, prev)?;
        let gin = s.graph.concat_cols(&[p, cond])?;
        let h = self.gru.forward(s, gin, None)?;
        let oin = s.graph.concat_cols(&[h, cond])?;
        self.output.forward(s, oin)
    }

    pub fn new_state<S: Scalar>(&self, mode: Mode) -> DecoderState<S> {
        DecoderState {
            mode,
            convs: self.convs.iter().map(|c| c.new_state(mode)).collect(),
            hidden: vec![S::zero(); self.cfg.gru_hidden],
            prev_frame: vec![S::zero(); self.cfg.output_dim],
        }
    }

    /// Incremental condition for `[c×H]` latent rows. Frames after the chunk
    /// read as zeros.
    pub fn condition_chunk<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        state: &mut DecoderState<S>,
        latent: &[S],
        speaker: &[S],
    ) -> Result<Vec<S>> {
        if latent.is_empty() || latent.len() % self.latent_dim != 0 {
            return Err(Error::shape(format!(
                "decoder chunk of {} values for latent dim {}",
                latent.len(),
                self.latent_dim
            )));
        }
        if speaker.len() != self.speakers.dim {
            return Err(Error::shape(format!(
                "speaker embedding of {} values, expected {}",
                speaker.len(),
                self.speakers.dim
            )));
        }
        let rows = latent.len() / self.latent_dim;
        let base = concat_rows_cols(&[(latent, self.latent_dim), (speaker, 0)], rows, speaker);
        if self.convs.is_empty() {
            return Ok(base);
        }
        let mut h = base.clone();
        for (c, st) in self.convs.iter().zip(&mut state.convs) {
            h = c.forward_chunk(params, state.mode, st, &h)?;
        }
        let cw = self.cfg.conv_channels;
        let bw = self.latent_dim + self.speakers.dim;
        Ok(concat_rows_cols(&[(&h, cw), (&base, bw)], rows, &[]))
    }

    /// One autoregressive step from a precomputed condition row.
    pub fn ar_step<S: Scalar>(&self, params: &ParamStore<S>, state: &mut DecoderState<S>, cond: &[S], prev: &[S]) -> Result<Vec<S>> {
        let mut p = prev.to_vec();
        for l in &self.prenet {
            p = l.apply(params, &p)?;
            p.iter_mut().for_each(|v| *v = kernels::relu(*v));
        }
        p.extend_from_slice(cond);
        let mut next = vec![S::zero(); self.cfg.gru_hidden];
        kernels::gru_cell(self.gru.weights(params), &p, &state.hidden, &mut next, None);
        state.hidden = next;
        let mut oin = state.hidden.clone();
        oin.extend_from_slice(cond);
        let frame = self.output.apply(params, &oin)?;
        state.prev_frame.clone_from(&frame);
        Ok(frame)
    }

    /// Generates one frame from `latent_t`, `spk` and `prev_frame`. In
    /// non-streaming mode the non-causal convolutions treat frames after
    /// `t` as zeros.
    pub fn decode_step<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        state: &mut DecoderState<S>,
        latent_t: &Tensor<S>,
        spk: &Tensor<S>,
        prev_frame: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if latent_t.len() != self.latent_dim || prev_frame.len() != self.cfg.output_dim {
            return Err(Error::shape(format!(
                "decode step expects latent {} and frame {}, got {} and {}",
                self.latent_dim,
                self.cfg.output_dim,
                latent_t.len(),
                prev_frame.len()
            )));
        }
        let cond = self.condition_chunk(params, state, latent_t.data(), spk.data())?;
        let frame = self.ar_step(params, state, &cond, prev_frame.data())?;
        Ok(Tensor::from_parts(vec![self.cfg.output_dim], frame))
    }

    /// Autoregressive rows for a chunk: conditions first, then one step per
    /// frame feeding back the state's previous frame.
    pub fn decode_chunk<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        state: &mut DecoderState<S>,
        latent: &[S],
        spk: &[S],
    ) -> Result<Vec<S>> {
        let cond = self.condition_chunk(params, state, latent, spk)?;
        self.run_ar(params, state, &cond)
    }

    fn run_ar<S: Scalar>(&self, params: &ParamStore<S>, state: &mut DecoderState<S>, cond: &[S]) -> Result<Vec<S>> {
        let cw = self.cond_dim();
        let mut out = Vec::with_capacity(cond.len() / cw * self.cfg.output_dim);
        for row in cond.chunks(cw) {
            let prev = state.prev_frame.clone();
            out.extend(self.ar_step(params, state, row, &prev)?);
        }
        Ok(out)
    }

    /// Free-running decode of a whole utterance: every step consumes the
    /// previously generated frame. Non-streaming mode conditions on the
    /// full latent sequence.
    pub fn decode_free_running<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        latent: &Tensor<S>,
        speaker: usize,
        mode: Mode,
    ) -> Result<Tensor<S>> {
        if latent.shape().len() != 2 {
            return Err(Error::shape("decoder latents must be a matrix"));
        }
        self.check_latents(latent.rows(), latent.cols())?;
        let mut s = Session::inference(params);
        let z = s.input(latent.clone());
        let cond = self.condition(&mut s, z, speaker, mode)?;
        let cond = s.graph.value(cond).data().to_vec();
        let mut state = self.new_state(mode);
        let out = self.run_ar(params, &mut state, &cond)?;
        Ok(Tensor::from_parts(vec![latent.rows(), self.cfg.output_dim], out))
    }
}

/// Row-wise concatenation of column blocks. A block with width 0 is a
/// single row broadcast to every row.
fn concat_rows_cols<S: Scalar>(blocks: &[(&[S], usize)], rows: usize, broadcast: &[S]) -> Vec<S> {
    let width: usize = blocks.iter().map(|&(_, w)| if w == 0 { broadcast.len() } else { w }).sum();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for &(data, w) in blocks {
            if w == 0 {
                out.extend_from_slice(broadcast);
            } else {
                out.extend_from_slice(&data[r * w..(r + 1) * w]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            output_dim: 3,
            speakers: 2,
            speaker_dim: 2,
            prenet: vec![4, 3],
            gru_hidden: 5,
            conv_layers: 2,
            conv_channels: 4,
            depthwise_kernel: 3,
            dropout: 0.1,
            ar_input_noise_std: 1.0,
            grad_noise_std: 1e-3,
        }
    }

    fn build(cfg: &DecoderConfig, seed: u64) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let dec = Decoder::register(&mut store, &mut Rng::new(seed), "decoder", 4, cfg).unwrap();
        (store, dec)
    }

    #[test]
    fn zero_network_outputs_bias() {
        let (mut store, dec) = build(&small_cfg(), 1);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        store.set(dec.output.bias, Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
        let z = init_normal(&mut Rng::new(2), &[5, 4], 1.0);
        for mode in Mode::BOTH {
            let y = dec.decode_free_running(&store, &z, 1, mode).unwrap();
            for r in 0..5 {
                assert_eq!(y.row(r), &[0.1, -0.2, 0.3]);
            }
        }
    }

    #[test]
    fn decode_step_is_deterministic() {
        let (store, dec) = build(&small_cfg(), 3);
        let spk = dec.speakers.lookup(&store, 0).unwrap();
        let z = Tensor::new(&[4], vec![0.3, -0.1, 0.8, 0.0]).unwrap();
        let prev = Tensor::new(&[3], vec![0.5, 0.5, -1.0]).unwrap();
        let mut a = dec.new_state(Mode::Streaming);
        let mut b = dec.new_state(Mode::Streaming);
        let ya = dec.decode_step(&store, &mut a, &z, &spk, &prev).unwrap();
        let yb = dec.decode_step(&store, &mut b, &z, &spk, &prev).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(a, b);
    }

    #[test]
    fn modes_coincide_for_unit_kernels() {
        let mut cfg = small_cfg();
        cfg.depthwise_kernel = 1;
        let (mut store, dec) = build(&cfg, 4);
        for c in &dec.convs {
            for (a, b) in c.branch_params(Mode::Streaming).into_iter().zip(c.branch_params(Mode::NonStreaming)) {
                let v = store.get(a).clone();
                store.set(b, v).unwrap();
            }
        }
        let z = init_normal(&mut Rng::new(5), &[7, 4], 1.0);
        let s = dec.decode_free_running(&store, &z, 0, Mode::Streaming).unwrap();
        let ns = dec.decode_free_running(&store, &z, 0, Mode::NonStreaming).unwrap();
        assert_eq!(s, ns);
    }

    #[test]
    fn teacher_forcing_noise() {
        let (store, dec) = build(&small_cfg(), 6);
        let z = init_normal(&mut Rng::new(7), &[6, 4], 1.0);
        let y = init_normal(&mut Rng::new(8), &[6, 3], 1.0);
        let run = |targets: &Tensor, std: f64, seed: u64| {
            let mut s = Session::new(&store, false, Rng::new(seed));
            let zv = s.input(z.clone());
            let out = dec.teacher_forced(&mut s, zv, 1, targets, Mode::Streaming, std).unwrap();
            s.graph.value(out).clone()
        };
        // Zero noise is plain teacher forcing regardless of the seed.
        assert_eq!(run(&y, 0.0, 1), run(&y, 0.0, 2));
        assert_eq!(run(&y, 1.0, 3), run(&y, 1.0, 3));
        assert_ne!(run(&y, 1.0, 3), run(&y, 0.0, 3));
        // Zero targets with zero noise feed zero frames, which is what
        // free-running would do if every output were zero.
        let zeros = Tensor::zeros(&[6, 3]);
        let tf = run(&zeros, 0.0, 1);
        let mut state = dec.new_state(Mode::Streaming);
        let spk = dec.speakers.lookup(&store, 1).unwrap();
        for t in 0..6 {
            let zt = Tensor::new(&[4], z.row(t).to_vec()).unwrap();
            let f = dec.decode_step(&store, &mut state, &zt, &spk, &Tensor::zeros(&[3])).unwrap();
            let diff: f32 = f.data().iter().zip(tf.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5, "step {t}: {diff}");
        }
    }

    #[test]
    fn free_running_output_is_a_teacher_forcing_fixed_point() {
        let (store, dec) = build(&small_cfg(), 15);
        let z = init_normal(&mut Rng::new(16), &[10, 4], 1.0);
        for mode in [Mode::Streaming, Mode::NonStreaming] {
            let y = dec.decode_free_running(&store, &z, 1, mode).unwrap();
            let mut s = Session::inference(&store);
            let zv = s.input(z.clone());
            let out = dec.teacher_forced(&mut s, zv, 1, &y, mode, 0.0).unwrap();
            let diff = s.graph.value(out).data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5, "{mode:?}: {diff}");
        }
    }

    #[test]
    fn teacher_forcing_length_mismatch() {
        let (store, dec) = build(&small_cfg(), 9);
        let mut s = Session::inference(&store);
        let zv = s.input(Tensor::zeros(&[6, 4]));
        let r = dec.teacher_forced(&mut s, zv, 0, &Tensor::zeros(&[5, 3]), Mode::Streaming, 0.0);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn free_running_single_frame_and_fold() {
        let (store, dec) = build(&small_cfg(), 10);
        let z = init_normal(&mut Rng::new(11), &[9, 4], 1.0);
        let y = dec.decode_free_running(&store, &z, 1, Mode::Streaming).unwrap();
        let spk = dec.speakers.lookup(&store, 1).unwrap();
        let mut state = dec.new_state(Mode::Streaming);
        let mut prev = Tensor::zeros(&[3]);
        for t in 0..9 {
            let zt = Tensor::new(&[4], z.row(t).to_vec()).unwrap();
            prev = dec.decode_step(&store, &mut state, &zt, &spk, &prev).unwrap();
            assert_eq!(prev.data(), y.row(t));
        }
        let y1 = dec.decode_free_running(&store, &z.slice_rows(0, 1).unwrap(), 1, Mode::Streaming).unwrap();
        assert_eq!(y1.row(0), y.row(0));
    }

    #[test]
    fn streaming_prefix_property() {
        let (store, dec) = build(&small_cfg(), 12);
        let z = init_normal(&mut Rng::new(13), &[12, 4], 1.0);
        let full = dec.decode_free_running(&store, &z, 0, Mode::Streaming).unwrap();
        for t in [1, 5, 11] {
            let p = dec.decode_free_running(&store, &z.slice_rows(0, t).unwrap(), 0, Mode::Streaming).unwrap();
            assert_eq!(p, full.slice_rows(0, t).unwrap());
        }
    }

    #[test]
    fn unknown_speaker() {
        let (store, dec) = build(&small_cfg(), 14);
        let r = dec.decode_free_running(&store, &Tensor::zeros(&[2, 4]), 2, Mode::Streaming);
        assert!(matches!(r, Err(Error::UnknownSpeaker { id: 2, count: 2 })));
    }

    #[test]
    fn negative_noise_rejected() {
        let mut cfg = small_cfg();
        cfg.ar_input_noise_std = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
