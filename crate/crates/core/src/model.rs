//! The full conversion model: encoder, decoder and the training-only
//! predictive coding heads.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::hpc::{HpcConfig, HpcHeads};
use crate::layers::{Mode, Session};
use crate::numerics::{ParamId, ParamStore, Rng, Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub hpc: HpcConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.hpc.validate()
    }

    /// A very small configuration for fast checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                input_dim: 3,
                bank_kernel_sizes: vec![1, 2, 3],
                bank_channels: 3,
                projection_channels: 4,
                highway_layers: 1,
                gru_hidden: 4,
                depthwise_kernel: 3,
                dropout: 0.1,
                bidirectional_noncausal_gru: false,
            },
            decoder: DecoderConfig {
                output_dim: 3,
                speakers: 2,
                speaker_dim: 2,
                prenet: vec![4, 3],
                gru_hidden: 4,
                conv_layers: 1,
                conv_channels: 3,
                depthwise_kernel: 3,
                dropout: 0.1,
                ar_input_noise_std: 1.0,
                grad_noise_std: 1e-3,
            },
            hpc: HpcConfig {
                m: 2,
                n_neg: 3,
                gnet_hidden: 3,
                ..HpcConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub hpc: HpcHeads,
    /// Parameters registered before the predictive coding heads; only these
    /// are needed for inference.
    pub inference_params: usize,
}

impl Model {
    /// Registers every parameter with initial values drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let encoder = Encoder::register(&mut store, &mut rng, "encoder", &cfg.encoder)?;
        let decoder = Decoder::register(&mut store, &mut rng, "decoder", cfg.encoder.gru_hidden, &cfg.decoder)?;
        let inference_params = store.len();
        let hpc = HpcHeads::register(&mut store, &mut rng, "hpc", cfg.encoder.gru_hidden, &cfg.hpc)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                decoder,
                hpc,
                inference_params,
            },
            store,
        ))
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.encoder.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.decoder.output_dim
    }

    pub fn speakers(&self) -> usize {
        self.cfg.decoder.speakers
    }

    /// Every convolution branch parameter used by `mode`.
    pub fn branch_params(&self, mode: Mode) -> Vec<ParamId> {
        let mut ids = self.encoder.branch_params(mode);
        ids.extend(self.decoder.branch_params(mode));
        ids
    }

    pub fn check_features<S: Scalar>(&self, features: &Tensor<S>) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "expected [T×{}] input features, got {:?}",
                self.input_dim(),
                features.shape()
            )));
        }
        Ok(())
    }

    /// Offline conversion of a whole utterance to `speaker`.
    pub fn convert<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        features: &Tensor<S>,
        speaker: usize,
        mode: Mode,
    ) -> Result<Tensor<S>> {
        self.check_features(features)?;
        self.decoder.speakers.check(speaker)?;
        let mut s = Session::inference(params);
        let x = s.input(features.clone());
        let z = self.encoder.forward(&mut s, x, mode)?;
        let latent = s.graph.value(z.var).clone();
        self.decoder.decode_free_running(params, &latent, speaker, mode)
    }
}
