use super::dense::LayerNormParams;
use super::{init_normal, Mode, Session};
use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Zero frames added `(left, right)` so a kernel of size `k` preserves
/// length. Causal convolutions pad on the left only; non-causal ones split
/// ⌈(k−1)/2⌉ left and ⌊(k−1)/2⌋ right.
pub fn padding_for(k: usize, causal: bool) -> (usize, usize) {
    if causal {
        (k - 1, 0)
    } else {
        (k / 2, (k - 1) / 2)
    }
}

/// The last `capacity` input frames of a convolution, carried between
/// chunks. Starts as zeros, which is exactly the offline left padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextRing<S: Scalar = f32> {
    channels: usize,
    capacity: usize,
    data: Vec<S>,
}

impl<S: Scalar> ContextRing<S> {
    pub fn new(capacity: usize, channels: usize) -> Self {
        Self {
            channels,
            capacity,
            data: vec![S::zero(); capacity * channels],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Frames currently held; always equal to the capacity.
    pub fn rows(&self) -> usize {
        self.data.len() / self.channels.max(1)
    }

    pub fn frames(&self) -> &[S] {
        &self.data
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<S>()
    }

    /// Returns `context ++ chunk` and keeps the newest `capacity` frames.
    pub fn extend(&mut self, chunk: &[S]) -> Vec<S> {
        let mut ext = Vec::with_capacity(self.data.len() + chunk.len());
        ext.extend_from_slice(&self.data);
        ext.extend_from_slice(chunk);
        let keep = self.capacity * self.channels;
        self.data.copy_from_slice(&ext[ext.len() - keep..]);
        ext
    }
}

/// General 1-D convolution, kernel `[C_out×C_in×k]`.
#[derive(Clone, Debug)]
pub struct Conv1dParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub causal: bool,
}

impl Conv1dParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        causal: bool,
    ) -> Self {
        let std = (1.0 / (c_in * k) as f64).sqrt();
        let kernel = store.register(format!("{name}.kernel"), init_normal(rng, &[c_out, c_in, k], std));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            kernel,
            bias,
            c_in,
            c_out,
            k,
            causal,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        padding_for(self.k, self.causal)
    }

    /// `x: [T×C_in] → [T×C_out]`.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let (left, right) = self.padding();
        let w = s.param(self.kernel);
        let b = s.param(self.bias);
        s.graph.conv1d(x, w, b, left, right)
    }

    pub fn new_ring<S: Scalar>(&self) -> ContextRing<S> {
        ContextRing::new(self.padding().0, self.c_in)
    }

    /// Incremental forward over `x: [c×C_in]` rows. Future frames beyond the
    /// chunk read as zeros.
    pub fn forward_chunk<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        ring: &mut ContextRing<S>,
        x: &[S],
    ) -> Result<Vec<S>> {
        if x.is_empty() || x.len() % self.c_in != 0 {
            return Err(Error::shape(format!(
                "conv chunk of {} values for {} channels",
                x.len(),
                self.c_in
            )));
        }
        let ext = ring.extend(x);
        let xp = kernels::pad_rows(&ext, self.c_in, 0, self.padding().1);
        let wr = kernels::conv_kernel_to_window_major(params.get(self.kernel).data(), self.c_out, self.c_in, self.k);
        Ok(kernels::conv_valid(&xp, self.c_in, &wr, self.k, self.c_out, params.get(self.bias).data()))
    }
}

/// Channel-wise convolution, kernel `[C×1×k]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub k: usize,
    pub causal: bool,
}

impl DepthwiseConv {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, k: usize, causal: bool) -> Self {
        let std = (1.0 / k as f64).sqrt();
        let kernel = store.register(format!("{name}.kernel"), init_normal(rng, &[channels, 1, k], std));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[channels]));
        Self {
            kernel,
            bias,
            channels,
            k,
            causal,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        padding_for(self.k, self.causal)
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let (left, right) = self.padding();
        let w = s.param(self.kernel);
        let b = s.param(self.bias);
        s.graph.depthwise_conv1d(x, w, b, left, right)
    }

    pub fn new_ring<S: Scalar>(&self) -> ContextRing<S> {
        ContextRing::new(self.padding().0, self.channels)
    }

    pub fn forward_chunk<S: Scalar>(&self, params: &ParamStore<S>, ring: &mut ContextRing<S>, x: &[S]) -> Vec<S> {
        let ext = ring.extend(x);
        let xp = kernels::pad_rows(&ext, self.channels, 0, self.padding().1);
        let wt = kernels::transpose(params.get(self.kernel).data(), self.channels, self.k);
        kernels::depthwise_valid(&xp, self.channels, &wt, self.k, params.get(self.bias).data())
    }
}

/// Depthwise-separable block: pointwise → ReLU → depthwise → ReLU →
/// pointwise → layer norm → dropout.
#[derive(Clone, Debug)]
pub struct BasicConvLayer {
    pub pointwise_in: Conv1dParams,
    pub depthwise: DepthwiseConv,
    pub pointwise_out: Conv1dParams,
    pub norm: LayerNormParams,
    pub dropout_rate: f32,
}

/// Incremental state of one [`BasicConvLayer`]: the depthwise stage's
/// input context. The pointwise stages have `k = 1` and need none.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicConvState<S: Scalar = f32> {
    pub depthwise: ContextRing<S>,
}

impl<S: Scalar> BasicConvState<S> {
    pub fn byte_size(&self) -> usize {
        self.depthwise.byte_size()
    }
}

fn check_dropout(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

impl BasicConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        channels: usize,
        c_out: usize,
        k: usize,
        causal: bool,
        dropout_rate: f32,
    ) -> Result<Self> {
        check_dropout(dropout_rate)?;
        Ok(Self {
            pointwise_in: Conv1dParams::register(store, rng, &format!("{name}.pw_in"), c_in, channels, 1, causal),
            depthwise: DepthwiseConv::register(store, rng, &format!("{name}.dw"), channels, k, causal),
            pointwise_out: Conv1dParams::register(store, rng, &format!("{name}.pw_out"), channels, c_out, 1, causal),
            norm: LayerNormParams::register(store, &format!("{name}.norm"), c_out),
            dropout_rate,
        })
    }

    pub fn causal(&self) -> bool {
        self.depthwise.causal
    }

    pub fn c_in(&self) -> usize {
        self.pointwise_in.c_in
    }

    pub fn c_out(&self) -> usize {
        self.pointwise_out.c_out
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        check_dropout(self.dropout_rate)?;
        let h = self.pointwise_in.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.depthwise.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.pointwise_out.forward(s, h)?;
        let h = self.norm.forward(s, h)?;
        s.dropout(h, self.dropout_rate)
    }

    pub fn new_state<S: Scalar>(&self) -> BasicConvState<S> {
        BasicConvState {
            depthwise: self.depthwise.new_ring(),
        }
    }

    /// Inference-mode forward over a chunk of `[c×C_in]` rows.
    pub fn forward_chunk<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        state: &mut BasicConvState<S>,
        x: &[S],
    ) -> Result<Vec<S>> {
        let mut none = ContextRing::new(0, self.c_in());
        let h = self.pointwise_in.forward_chunk(params, &mut none, x)?;
        let h: Vec<S> = h.into_iter().map(kernels::relu).collect();
        let h = self.depthwise.forward_chunk(params, &mut state.depthwise, &h);
        let h: Vec<S> = h.into_iter().map(kernels::relu).collect();
        let mut none = ContextRing::new(0, self.depthwise.channels);
        let h = self.pointwise_out.forward_chunk(params, &mut none, &h)?;
        Ok(self.norm.apply(params, &h))
    }
}

/// Two independent [`BasicConvLayer`]s, one causal and one non-causal.
/// Exactly one runs per call.
#[derive(Clone, Debug)]
pub struct DualModeConvBlock {
    pub causal_branch: BasicConvLayer,
    pub noncausal_branch: BasicConvLayer,
}

impl DualModeConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        channels: usize,
        c_out: usize,
        k: usize,
        dropout_rate: f32,
    ) -> Result<Self> {
        Ok(Self {
            causal_branch: BasicConvLayer::register(
                store,
                rng,
                &format!("{name}.causal"),
                c_in,
                channels,
                c_out,
                k,
                true,
                dropout_rate,
            )?,
            noncausal_branch: BasicConvLayer::register(
                store,
                rng,
                &format!("{name}.noncausal"),
                c_in,
                channels,
                c_out,
                k,
                false,
                dropout_rate,
            )?,
        })
    }

    pub fn branch(&self, mode: Mode) -> &BasicConvLayer {
        match mode {
            Mode::Streaming => &self.causal_branch,
            Mode::NonStreaming => &self.noncausal_branch,
        }
    }

    pub fn c_out(&self) -> usize {
        self.causal_branch.c_out()
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var, mode: Mode) -> Result<Var> {
        self.branch(mode).forward(s, x)
    }

    pub fn new_state<S: Scalar>(&self, mode: Mode) -> BasicConvState<S> {
        self.branch(mode).new_state()
    }

    pub fn forward_chunk<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        mode: Mode,
        state: &mut BasicConvState<S>,
        x: &[S],
    ) -> Result<Vec<S>> {
        self.branch(mode).forward_chunk(params, state, x)
    }

    /// Parameter ids of one branch.
    pub fn branch_params(&self, mode: Mode) -> Vec<ParamId> {
        let b = self.branch(mode);
        vec![
            b.pointwise_in.kernel,
            b.pointwise_in.bias,
            b.depthwise.kernel,
            b.depthwise.bias,
            b.pointwise_out.kernel,
            b.pointwise_out.bias,
            b.norm.gamma,
            b.norm.beta,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(causal: bool, dropout: f32) -> (ParamStore, BasicConvLayer) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let l = BasicConvLayer::register(&mut store, &mut rng, "l", 3, 6, 4, 5, causal, dropout).unwrap();
        (store, l)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        init_normal(&mut Rng::new(seed), &[rows, cols], 1.0)
    }

    fn run(store: &ParamStore, l: &BasicConvLayer, x: &Tensor, training: bool) -> Tensor {
        let mut s = Session::new(store, training, Rng::new(11));
        let xv = s.input(x.clone());
        let y = l.forward(&mut s, xv).unwrap();
        s.graph.value(y).clone()
    }

    #[test]
    fn padding_convention() {
        assert_eq!(padding_for(3, true), (2, 0));
        assert_eq!(padding_for(3, false), (1, 1));
        assert_eq!(padding_for(4, false), (2, 1));
        assert_eq!(padding_for(1, false), (0, 0));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut store, l) = layer(true, 0.1);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let y = run(&store, &l, &random_input(7, 3, 1), false);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dropout_train_equals_inference() {
        let (store, l) = layer(false, 0.0);
        let x = random_input(9, 3, 2);
        assert_eq!(run(&store, &l, &x, true), run(&store, &l, &x, false));
    }

    #[test]
    fn dropout_of_one_is_config_error() {
        let mut store = ParamStore::new();
        let r = BasicConvLayer::register(&mut store, &mut Rng::new(0), "l", 2, 2, 2, 3, true, 1.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn causal_layer_ignores_future_perturbation() {
        let (store, l) = layer(true, 0.0);
        let x = random_input(16, 3, 3);
        let base = run(&store, &l, &x, false);
        let mut data = x.data().to_vec();
        data[10 * 3 + 1] += 1.5;
        let perturbed = run(&store, &l, &Tensor::new(&[16, 3], data).unwrap(), false);
        assert_eq!(&base.data()[..10 * 4], &perturbed.data()[..10 * 4]);
        assert_ne!(&base.data()[10 * 4..], &perturbed.data()[10 * 4..]);
    }

    #[test]
    fn chunked_matches_graph_bitwise() {
        let (store, l) = layer(true, 0.0);
        let x = random_input(13, 3, 4);
        let full = run(&store, &l, &x, false);
        let mut state = l.new_state();
        let mut out = Vec::new();
        for (start, len) in [(0, 1), (1, 5), (6, 7)] {
            out.extend(l.forward_chunk(&store, &mut state, &x.data()[start * 3..(start + len) * 3]).unwrap());
        }
        assert_eq!(full.data(), &out[..]);
        assert_eq!(state.depthwise.rows(), 4);
    }

    #[test]
    fn dual_mode_dispatch_and_isolation() {
        let mut store = ParamStore::new();
        let block = DualModeConvBlock::register(&mut store, &mut Rng::new(1), "b", 3, 5, 3, 3, 0.0).unwrap();
        let x = random_input(8, 3, 9);
        for mode in Mode::BOTH {
            let mut s = Session::inference(&store);
            let xv = s.input(x.clone());
            let y = block.forward(&mut s, xv, mode).unwrap();
            let expect = run(&store, block.branch(mode), &x, false);
            assert_eq!(s.graph.value(y), &expect);

            let loss = s.graph.sum(y);
            let grads = s.graph.backward(loss).unwrap();
            let other = if mode == Mode::Streaming { Mode::NonStreaming } else { Mode::Streaming };
            assert!(block.branch_params(other).iter().all(|&id| grads.is_zero(id)));
            assert!(block.branch_params(mode).iter().any(|&id| !grads.is_zero(id)));
        }
    }

    #[test]
    fn ring_never_exceeds_capacity() {
        let mut ring = ContextRing::<f32>::new(2, 1);
        for n in 1..6 {
            let chunk: Vec<f32> = (0..n).map(|v| v as f32).collect();
            let ext = ring.extend(&chunk);
            assert_eq!(ext.len(), n + 2);
            assert_eq!(ring.rows(), 2);
        }
    }
}
