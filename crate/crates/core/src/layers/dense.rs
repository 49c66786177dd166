use super::{init_normal, Session};
use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Per-frame layer normalization over channels.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b)
    }

    pub fn apply<S: Scalar>(&self, params: &ParamStore<S>, x: &[S]) -> Vec<S> {
        kernels::layer_norm(x, self.dim, params.get(self.gamma).data(), params.get(self.beta).data()).0
    }
}

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Self {
            weight: store.register(format!("{name}.weight"), init_normal(rng, &[input, output], std)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[output])),
            input,
            output,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, Some(b))
    }

    /// Row-wise application to a `[rows×in]` buffer.
    pub fn apply<S: Scalar>(&self, params: &ParamStore<S>, x: &[S]) -> Result<Vec<S>> {
        if x.len() % self.input != 0 {
            return Err(Error::shape(format!(
                "linear expects rows of {}, got {} values",
                self.input,
                x.len()
            )));
        }
        let rows = x.len() / self.input;
        Ok(kernels::matmul(
            x,
            rows,
            self.input,
            params.get(self.weight).data(),
            self.output,
            Some(params.get(self.bias).data()),
        ))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Highway layer: `y = x + T(x) ⊙ (H(x) − x)` with `H = ReLU(affine)` and
/// gate `T = σ(affine)`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

impl Highway {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize) -> Self {
        let transform = Linear::register(store, rng, &format!("{name}.transform"), dim, dim);
        let gate = Linear::register(store, rng, &format!("{name}.gate"), dim, dim);
        // Start biased towards carrying the input through.
        store.set(gate.bias, Tensor::full(&[dim], -1.0)).expect("gate bias shape");
        Self { transform, gate }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Result<Var> {
        let h = self.transform.forward(s, x)?;
        let h = s.graph.relu(h);
        let t = self.gate.forward(s, x)?;
        let t = s.graph.sigmoid(t);
        let d = s.graph.sub(h, x)?;
        let m = s.graph.mul(t, d)?;
        s.graph.add(x, m)
    }

    pub fn apply<S: Scalar>(&self, params: &ParamStore<S>, x: &[S]) -> Result<Vec<S>> {
        let h = self.transform.apply(params, x)?;
        let t = self.gate.apply(params, x)?;
        Ok(x.iter()
            .zip(h)
            .zip(t)
            .map(|((&xv, hv), tv)| xv + kernels::sigmoid(tv) * (kernels::relu(hv) - xv))
            .collect())
    }
}
