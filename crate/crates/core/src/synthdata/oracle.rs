use nalgebra::{DMatrix, DVector};

use super::Corpus;
use crate::error::{Error, Result};

/// Ridge strength of the least-squares fit.
pub const RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleReport {
    /// Held-out MSE of the affine least-squares map.
    pub mse: f64,
    /// Held-out MSE of predicting the training mean.
    pub mean_baseline: f64,
}

/// Fits an affine map from input features to speaker `target`'s features
/// on the training utterances and scores it on held-out utterances of the
/// other speakers.
pub fn linear_oracle(corpus: &Corpus, target: usize) -> Result<OracleReport> {
    if target >= corpus.cfg.speakers {
        return Err(Error::UnknownSpeaker {
            id: target,
            count: corpus.cfg.speakers,
        });
    }
    let d_in = corpus.cfg.content_dim + 1;
    let d_out = corpus.cfg.feature_dim;
    let mut xtx = DMatrix::<f64>::zeros(d_in, d_in);
    let mut xty = DMatrix::<f64>::zeros(d_in, d_out);
    let mut y_sum = DVector::<f64>::zeros(d_out);
    let mut n = 0usize;
    let design = |row: &[f32]| {
        let mut v = DVector::<f64>::zeros(d_in);
        for (i, &x) in row.iter().enumerate() {
            v[i] = x as f64;
        }
        v[d_in - 1] = 1.0;
        v
    };
    for u in corpus.training() {
        let y = &u.targets[target];
        for t in 0..u.bnf.rows() {
            let x = design(u.bnf.row(t));
            let yt = DVector::from_iterator(d_out, y.row(t).iter().map(|&v| v as f64));
            xtx += &x * x.transpose();
            xty += &x * yt.transpose();
            y_sum += yt;
            n += 1;
        }
    }
    for i in 0..d_in {
        xtx[(i, i)] += RIDGE;
    }
    let w = xtx
        .cholesky()
        .ok_or_else(|| Error::Config("normal equations are not positive definite".into()))?
        .solve(&xty);
    let y_mean = y_sum / n as f64;
    let (mut se, mut se_mean, mut count) = (0.0, 0.0, 0usize);
    for u in corpus.held_out().filter(|u| u.speaker != target) {
        let y = &u.targets[target];
        for t in 0..u.bnf.rows() {
            let pred = w.transpose() * design(u.bnf.row(t));
            for (j, &yv) in y.row(t).iter().enumerate() {
                se += (pred[j] - yv as f64).powi(2);
                se_mean += (y_mean[j] - yv as f64).powi(2);
            }
            count += d_out;
        }
    }
    Ok(OracleReport {
        mse: se / count as f64,
        mean_baseline: se_mean / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_corpus, SynthCorpusConfig};
    use super::*;

    fn cfg(corruption: f64) -> SynthCorpusConfig {
        SynthCorpusConfig {
            utterances_per_speaker: 6,
            held_out_per_speaker: 2,
            frames: 120,
            corruption_variance: corruption,
            ..SynthCorpusConfig::default()
        }
    }

    #[test]
    fn noiseless_map_is_recovered() {
        let c = generate_corpus(&cfg(0.0)).unwrap();
        for k in 0..c.cfg.speakers {
            let r = linear_oracle(&c, k).unwrap();
            assert!(r.mse < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn corrupted_floor_is_below_mean_baseline() {
        let c = generate_corpus(&cfg(0.01)).unwrap();
        for k in 0..c.cfg.speakers {
            let r = linear_oracle(&c, k).unwrap();
            assert!(r.mse.is_finite() && r.mse > 0.0);
            assert!(r.mse < r.mean_baseline, "{r:?}");
        }
    }

    #[test]
    fn unknown_target() {
        let c = generate_corpus(&cfg(0.01)).unwrap();
        assert!(matches!(linear_oracle(&c, 9), Err(Error::UnknownSpeaker { .. })));
    }
}
