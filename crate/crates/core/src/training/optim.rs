use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and optional per-parameter learning-rate
/// multipliers. Parameters without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    lr_scale: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {cfg:?}")));
        }
        let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
        Ok(Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            lr_scale: vec![1.0; sizes.len()],
            t: 0,
        })
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f32) {
        self.lr_scale[id.index()] = scale;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::NonFiniteParam {
                name: params.name(id).to_string(),
                what: "gradient",
            });
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let scale = self.lr_scale[i];
            if scale == 0.0 {
                continue;
            }
            let lr = (self.cfg.learning_rate * scale as f64 / c1) as f32;
            let c2 = c2 as f32;
            let eps = self.cfg.eps as f32;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.data_mut(id);
            for k in 0..g.len() {
                m[k] = b1 as f32 * m[k] + (1.0 - b1 as f32) * g[k];
                v[k] = b2 as f32 * v[k] + (1.0 - b2 as f32) * g[k] * g[k];
                p[k] -= lr * m[k] / ((v[k] / c2).sqrt() + eps);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteParam {
                    name: params.name(id).to_string(),
                    what: "value after update",
                });
            }
        }
        Ok(())
    }
}

/// Adds independent `N(0, std²)` noise to the gradients of `ids`; every
/// other gradient is left as is. Absent gradients are treated as zeros and
/// materialized.
pub fn add_gradient_noise(grads: &mut Gradients, params: &ParamStore, ids: &[ParamId], rng: &mut Rng, std: f64) {
    if std == 0.0 {
        return;
    }
    for &id in ids {
        if grads.get(id).is_none() {
            grads.insert(id, vec![0.0; params.get(id).len()]);
        }
        let g = grads.get_mut(id).expect("inserted above");
        for v in g.iter_mut() {
            *v += (std * rng.standard_normal()) as f32;
        }
    }
}
