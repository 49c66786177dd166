use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

pub const TEMPO_RANGE: [f64; 2] = [0.8, 1.5];

/// Resamples `[T×D]` frames to `round(T / multiplier)` frames by linear
/// interpolation at positions `i·multiplier`.
pub fn tempo_augment<S: Scalar>(features: &Tensor<S>, multiplier: f64) -> Result<Tensor<S>> {
    if !(TEMPO_RANGE[0]..=TEMPO_RANGE[1]).contains(&multiplier) {
        return Err(Error::Argument(format!(
            "tempo multiplier {multiplier} outside [{}, {}]",
            TEMPO_RANGE[0], TEMPO_RANGE[1]
        )));
    }
    let (t, d) = (features.rows(), features.cols());
    let out_len = ((t as f64 / multiplier).round() as usize).max(1);
    let x = features.data();
    let mut out = Vec::with_capacity(out_len * d);
    for i in 0..out_len {
        let pos = (i as f64 * multiplier).min((t - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 {
            out.extend_from_slice(&x[lo * d..(lo + 1) * d]);
            continue;
        }
        let hi = (lo + 1).min(t - 1);
        let f = S::of(frac);
        for c in 0..d {
            let a = x[lo * d + c];
            let b = x[hi * d + c];
            out.push(a + f * (b - a));
        }
    }
    Tensor::new(&[out_len, d], out)
}

/// Uniform draw from `range`.
pub fn sample_multiplier(rng: &mut Rng, range: [f64; 2]) -> f64 {
    rng.uniform_range(range[0], range[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_normal;

    #[test]
    fn unit_multiplier_is_identity() {
        let x = init_normal(&mut Rng::new(1), &[13, 3], 1.0);
        assert_eq!(tempo_augment(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn output_lengths() {
        let x = Tensor::full(&[100, 2], 0.7f32);
        assert_eq!(tempo_augment(&x, 0.8).unwrap().rows(), 125);
        let slow = tempo_augment(&x, 1.5).unwrap();
        assert_eq!(slow.rows(), 67);
        assert!(slow.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn out_of_range_rejected() {
        let x = Tensor::full(&[10, 2], 0.0f32);
        assert!(matches!(tempo_augment(&x, 0.5), Err(Error::Argument(_))));
        assert!(matches!(tempo_augment(&x, 1.6), Err(Error::Argument(_))));
    }

    #[test]
    fn interpolates_linearly() {
        let x = Tensor::new(&[3, 1], vec![0.0f64, 1.0, 4.0]).unwrap();
        let y = tempo_augment(&x, 1.5).unwrap();
        assert_eq!(y.data(), &[0.0, 2.5]);
    }
}
