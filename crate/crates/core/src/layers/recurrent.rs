use super::{init_uniform, Session};
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, GruWeights};
use crate::numerics::{ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Unidirectional GRU. Weights are stored input-major: `w_ih: [I×3H]`,
/// `w_hh: [H×3H]`, gate blocks ordered reset, update, new.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.register(format!("{name}.w_ih"), init_uniform(rng, &[input, 3 * hidden], bound)),
            w_hh: store.register(format!("{name}.w_hh"), init_uniform(rng, &[hidden, 3 * hidden], bound)),
            b_ih: store.register(format!("{name}.b_ih"), init_uniform(rng, &[3 * hidden], bound)),
            b_hh: store.register(format!("{name}.b_hh"), init_uniform(rng, &[3 * hidden], bound)),
            input,
            hidden,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }

    /// Whole-sequence forward, `[T×I] → [T×H]`.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var, h0: Option<Var>) -> Result<Var> {
        let [a, b, c, d] = self.params().map(|id| s.param(id));
        s.graph.gru(x, h0, a, b, c, d)
    }

    pub fn weights<'a, S: Scalar>(&self, params: &'a ParamStore<S>) -> GruWeights<'a, S> {
        GruWeights {
            w_ih: params.get(self.w_ih).data(),
            w_hh: params.get(self.w_hh).data(),
            b_ih: params.get(self.b_ih).data(),
            b_hh: params.get(self.b_hh).data(),
            input: self.input,
            hidden: self.hidden,
        }
    }

    /// One recurrence step: `(x_t, h_{t−1}) → h_t`.
    pub fn step<S: Scalar>(&self, params: &ParamStore<S>, x_t: &Tensor<S>, h_prev: &Tensor<S>) -> Result<Tensor<S>> {
        if x_t.len() != self.input || h_prev.len() != self.hidden {
            return Err(Error::shape(format!(
                "gru step expects input {} and hidden {}, got {} and {}",
                self.input,
                self.hidden,
                x_t.len(),
                h_prev.len()
            )));
        }
        let mut out = vec![S::zero(); self.hidden];
        kernels::gru_cell(self.weights(params), x_t.data(), h_prev.data(), &mut out, None);
        Ok(Tensor::from_parts(vec![self.hidden], out))
    }

    /// Runs the recurrence over `[c×I]` rows, updating `h` in place.
    /// Returns every hidden state.
    pub fn run_chunk<S: Scalar>(&self, params: &ParamStore<S>, x: &[S], h: &mut Vec<S>) -> Vec<S> {
        let w = self.weights(params);
        let rows = x.len() / self.input;
        let mut out = Vec::with_capacity(rows * self.hidden);
        let mut next = vec![S::zero(); self.hidden];
        for r in 0..rows {
            kernels::gru_cell(w, &x[r * self.input..(r + 1) * self.input], h, &mut next, None);
            out.extend_from_slice(&next);
            std::mem::swap(h, &mut next);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_normal;

    fn zero_layer(input: usize, hidden: usize) -> (ParamStore, GruLayer) {
        let mut store = ParamStore::new();
        let g = GruLayer::register(&mut store, &mut Rng::new(0), "g", input, hidden);
        for id in g.params() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        (store, g)
    }

    #[test]
    fn zero_weights_analytic_gates() {
        let (store, g) = zero_layer(1, 1);
        let h = g.step(&store, &Tensor::scalar(0.3), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(h.data(), &[0.5]);
        let h = g.step(&store, &Tensor::scalar(0.3), &Tensor::scalar(0.0)).unwrap();
        assert_eq!(h.data(), &[0.0]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let (store, g) = zero_layer(2, 3);
        let r = g.step(&store, &Tensor::zeros(&[3]), &Tensor::zeros(&[3]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn fold_of_steps_equals_sequence_forward() {
        let mut store = ParamStore::new();
        let g = GruLayer::register(&mut store, &mut Rng::new(21), "g", 3, 4);
        let x = init_normal(&mut Rng::new(22), &[6, 3], 1.0);

        let mut s = Session::inference(&store);
        let xv = s.input(x.clone());
        let y = g.forward(&mut s, xv, None).unwrap();
        let batched = s.graph.value(y).clone();

        let mut h = Tensor::zeros(&[4]);
        for t in 0..6 {
            let xt = Tensor::new(&[3], x.row(t).to_vec()).unwrap();
            h = g.step(&store, &xt, &h).unwrap();
            assert_eq!(h.data(), batched.row(t));
        }
    }

    #[test]
    fn output_is_unidirectional() {
        let mut store = ParamStore::new();
        let g = GruLayer::register(&mut store, &mut Rng::new(2), "g", 2, 3);
        let x = init_normal(&mut Rng::new(3), &[8, 2], 1.0);
        let mut h = vec![0.0; 3];
        let base = g.run_chunk(&store, x.data(), &mut h);
        let mut xd = x.data().to_vec();
        xd[5 * 2] += 1.0;
        let mut h = vec![0.0; 3];
        let pert = g.run_chunk(&store, &xd, &mut h);
        assert_eq!(&base[..5 * 3], &pert[..5 * 3]);
        assert_ne!(&base[5 * 3..], &pert[5 * 3..]);
    }
}
