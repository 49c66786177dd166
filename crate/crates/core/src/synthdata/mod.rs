//! Synthetic parallel corpus.
//!
//! A shared content signal stands in for speech content: piecewise-constant
//! Gaussian segments (5 to 20 frames) smoothed by a one-pole low-pass.
//! Input features are the content plus Gaussian corruption; each speaker's
//! features are a fixed random affine map of the content. Since every
//! speaker's rendition of every utterance exists, conversion error can be
//! measured directly against ground truth.

mod features;
mod oracle;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{decode_features, encode_features, read_features, write_features, FeatureFile};
pub use oracle::{linear_oracle, OracleReport};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::training::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub speakers: usize,
    pub content_dim: usize,
    pub feature_dim: usize,
    pub utterances_per_speaker: usize,
    /// Utterances per speaker kept out of training.
    pub held_out_per_speaker: usize,
    pub frames: usize,
    pub hop_ms: f32,
    /// Variance of the Gaussian corruption added to the content.
    pub corruption_variance: f64,
    /// One-pole smoothing coefficient of the content low-pass.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 4,
            content_dim: 8,
            feature_dim: 16,
            utterances_per_speaker: 12,
            held_out_per_speaker: 2,
            frames: 200,
            hop_ms: 12.5,
            corruption_variance: 0.01,
            smoothing: 0.6,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::Config("synth.speakers must be at least 2".into()));
        }
        if self.content_dim == 0 || self.feature_dim == 0 || self.frames == 0 {
            return Err(Error::Config("synth dimensions and frame count must be positive".into()));
        }
        if self.held_out_per_speaker >= self.utterances_per_speaker {
            return Err(Error::Config("synth.held_out_per_speaker must leave training utterances".into()));
        }
        if !(self.hop_ms > 0.0) || !(self.corruption_variance >= 0.0) || !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("synth hop, corruption or smoothing out of range".into()));
        }
        Ok(())
    }
}

/// Per-channel normalisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    fn of(mats: &[&Tensor]) -> Self {
        let d = mats[0].cols();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for m in mats {
            for r in 0..m.rows() {
                for (s, &v) in sum.iter_mut().zip(m.row(r)) {
                    *s += v as f64;
                }
            }
            n += m.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; d];
        for m in mats {
            for r in 0..m.rows() {
                for ((s, &v), mu) in sq.iter_mut().zip(m.row(r)).zip(&mean) {
                    *s += (v as f64 - mu).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / n as f64).sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    fn apply(&self, m: &Tensor) -> Tensor {
        let d = m.cols();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % d]) / self.std[i % d]) as f32)
            .collect();
        Tensor::from_parts(m.shape().to_vec(), data)
    }

    pub fn invert(&self, m: &Tensor) -> Tensor {
        let d = m.cols();
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 * self.std[i % d] + self.mean[i % d]) as f32)
            .collect();
        Tensor::from_parts(m.shape().to_vec(), data)
    }
}

/// Speaker rendition `y_t = A·c_t + b`, `A: [D_out×D_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerMap {
    pub a: Tensor<f64>,
    pub b: Vec<f64>,
}

impl SpeakerMap {
    pub fn apply(&self, content: &Tensor) -> Tensor {
        let (d_out, d_c) = (self.a.rows(), self.a.cols());
        let mut out = Vec::with_capacity(content.rows() * d_out);
        for t in 0..content.rows() {
            let c = content.row(t);
            for o in 0..d_out {
                let mut acc = self.b[o];
                for (k, &cv) in c.iter().enumerate().take(d_c) {
                    acc += self.a.at(o, k) * cv as f64;
                }
                out.push(acc as f32);
            }
        }
        Tensor::from_parts(vec![content.rows(), d_out], out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub held_out: bool,
    /// Clean content, unnormalised.
    pub content: Tensor,
    /// Normalised corrupted content: the model input.
    pub bnf: Tensor,
    /// Normalised features of this utterance as spoken by every speaker.
    pub targets: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub cfg: SynthCorpusConfig,
    pub maps: Vec<SpeakerMap>,
    pub bnf_stats: Stats,
    pub target_stats: Stats,
    pub utterances: Vec<Utterance>,
}

fn content_signal(rng: &mut Rng, frames: usize, dim: usize, smoothing: f64) -> Tensor {
    let mut level = vec![0.0f64; dim];
    let mut left = 0usize;
    let mut state: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        if left == 0 {
            left = 5 + rng.below(16);
            level.iter_mut().for_each(|v| *v = rng.standard_normal());
        }
        left -= 1;
        let s = state.get_or_insert_with(|| level.clone());
        for (sv, &lv) in s.iter_mut().zip(&level) {
            *sv = smoothing * *sv + (1.0 - smoothing) * lv;
        }
        out.extend(s.iter().map(|&v| v as f32));
    }
    Tensor::from_parts(vec![frames, dim], out)
}

/// Deterministic corpus for `cfg`.
pub fn generate_corpus(cfg: &SynthCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let scale = (1.0 / cfg.content_dim as f64).sqrt();
    let maps: Vec<SpeakerMap> = (0..cfg.speakers)
        .map(|_| {
            let a = Tensor::from_parts(
                vec![cfg.feature_dim, cfg.content_dim],
                (0..cfg.feature_dim * cfg.content_dim)
                    .map(|_| scale * rng.standard_normal())
                    .collect(),
            );
            let b = (0..cfg.feature_dim).map(|_| rng.standard_normal()).collect();
            SpeakerMap { a, b }
        })
        .collect();
    let noise_std = cfg.corruption_variance.sqrt();
    let mut raw = Vec::new();
    for speaker in 0..cfg.speakers {
        for u in 0..cfg.utterances_per_speaker {
            let content = content_signal(&mut rng, cfg.frames, cfg.content_dim, cfg.smoothing);
            let noisy = content
                .data()
                .iter()
                .map(|&v| v + (noise_std * rng.standard_normal()) as f32)
                .collect();
            let bnf = Tensor::from_parts(content.shape().to_vec(), noisy);
            let targets: Vec<Tensor> = maps.iter().map(|m| m.apply(&content)).collect();
            let held_out = u >= cfg.utterances_per_speaker - cfg.held_out_per_speaker;
            raw.push((speaker, held_out, content, bnf, targets));
        }
    }
    let bnf_stats = Stats::of(&raw.iter().map(|r| &r.3).collect::<Vec<_>>());
    let target_stats = Stats::of(&raw.iter().flat_map(|r| r.4.iter()).collect::<Vec<_>>());
    let utterances = raw
        .into_iter()
        .map(|(speaker, held_out, content, bnf, targets)| Utterance {
            speaker,
            held_out,
            bnf: bnf_stats.apply(&bnf),
            targets: targets.iter().map(|t| target_stats.apply(t)).collect(),
            content,
        })
        .collect();
    Ok(Corpus {
        cfg: cfg.clone(),
        maps,
        bnf_stats,
        target_stats,
        utterances,
    })
}

impl Corpus {
    pub fn training(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| !u.held_out)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.held_out)
    }

    /// A fresh utterance of `frames` frames from the corpus' speakers and
    /// normalisation, marked held out.
    pub fn sample_utterance(&self, rng: &mut Rng, speaker: usize, frames: usize) -> Result<Utterance> {
        if speaker >= self.cfg.speakers {
            return Err(Error::UnknownSpeaker {
                id: speaker,
                count: self.cfg.speakers,
            });
        }
        if frames == 0 {
            return Err(Error::Argument("utterance needs at least one frame".into()));
        }
        let noise_std = self.cfg.corruption_variance.sqrt();
        let content = content_signal(rng, frames, self.cfg.content_dim, self.cfg.smoothing);
        let noisy = content
            .data()
            .iter()
            .map(|&v| v + (noise_std * rng.standard_normal()) as f32)
            .collect();
        let bnf = Tensor::from_parts(content.shape().to_vec(), noisy);
        Ok(Utterance {
            speaker,
            held_out: true,
            bnf: self.bnf_stats.apply(&bnf),
            targets: self.maps.iter().map(|m| self.target_stats.apply(&m.apply(&content))).collect(),
            content,
        })
    }

    /// Reconstruction examples: each training utterance paired with its
    /// own speaker's features.
    pub fn train_examples(&self) -> Vec<Example> {
        self.training()
            .map(|u| Example {
                features: u.bnf.clone(),
                targets: u.targets[u.speaker].clone(),
                speaker: u.speaker,
            })
            .collect()
    }

    /// Held-out conversion triples `(input, target speaker, ground truth)`
    /// towards every speaker other than the source.
    pub fn conversion_pairs(&self) -> Vec<(&Tensor, usize, &Tensor)> {
        self.held_out()
            .flat_map(|u| {
                (0..self.cfg.speakers)
                    .filter(move |&k| k != u.speaker)
                    .map(move |k| (&u.bnf, k, &u.targets[k]))
            })
            .collect()
    }

    /// Writes the corpus as feature files plus a `corpus.json` index.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (i, u) in self.utterances.iter().enumerate() {
            let bnf = format!("utt{i:03}.bnf.dvcf");
            write_features(&dir.join(&bnf), &u.bnf, self.cfg.hop_ms)?;
            let mut targets = Vec::new();
            for (k, t) in u.targets.iter().enumerate() {
                let name = format!("utt{i:03}.spk{k}.dvcf");
                write_features(&dir.join(&name), t, self.cfg.hop_ms)?;
                targets.push(name);
            }
            entries.push(IndexEntry {
                speaker: u.speaker,
                held_out: u.held_out,
                bnf,
                targets,
            });
        }
        let index = Index {
            config: self.cfg.clone(),
            bnf_stats: self.bnf_stats.clone(),
            target_stats: self.target_stats.clone(),
            utterances: entries,
        };
        let path = dir.join("corpus.json");
        let text = serde_json::to_string_pretty(&index)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    speaker: usize,
    held_out: bool,
    bnf: String,
    targets: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    config: SynthCorpusConfig,
    bnf_stats: Stats,
    target_stats: Stats,
    utterances: Vec<IndexEntry>,
}

/// A corpus read back from disk. Clean content and speaker maps are not
/// stored, so only the feature side is available.
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub cfg: SynthCorpusConfig,
    pub utterances: Vec<(usize, bool, Tensor, Vec<Tensor>)>,
}

impl CorpusFiles {
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text)?;
        let mut utterances = Vec::with_capacity(index.utterances.len());
        for e in index.utterances {
            let bnf = read_features(&dir.join(&e.bnf))?.frames;
            let targets = e
                .targets
                .iter()
                .map(|t| read_features(&dir.join(t)).map(|f| f.frames))
                .collect::<Result<Vec<_>>>()?;
            if e.speaker >= targets.len() {
                return Err(Error::Config(format!("{}: speaker {} has no target file", e.bnf, e.speaker)));
            }
            utterances.push((e.speaker, e.held_out, bnf, targets));
        }
        Ok(Self {
            cfg: index.config,
            utterances,
        })
    }

    pub fn train_examples(&self) -> Vec<Example> {
        self.utterances
            .iter()
            .filter(|u| !u.1)
            .map(|(speaker, _, bnf, targets)| Example {
                features: bnf.clone(),
                targets: targets[*speaker].clone(),
                speaker: *speaker,
            })
            .collect()
    }
}
