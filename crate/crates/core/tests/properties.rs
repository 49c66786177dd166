//! Invariants over randomly drawn inputs.

mod common;

use dualvc::bench::{count_flops, predict_latency};
use dualvc::hpc::sample_negatives;
use dualvc::layers::Mode;
use dualvc::model::{Model, ModelConfig};
use dualvc::numerics::{Rng, Tensor};
use dualvc::streaming::{concat_frames, open_stream, push_chunk};
use dualvc::synthdata::{decode_features, encode_features};
use dualvc::training::tempo_augment;
use proptest::prelude::*;

fn tiny() -> (Model, dualvc::numerics::ParamStore) {
    Model::new(&ModelConfig::tiny(), 17).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn any_chunking_matches_offline(seed in 0u64..1000, cuts in prop::collection::vec(1usize..9, 1..8)) {
        let (model, params) = tiny();
        let total: usize = cuts.iter().sum();
        let x = common::random(&mut Rng::new(seed), &[total, 3], 1.0);
        let offline = model.convert(&params, &x, 1, Mode::Streaming).unwrap();
        let mut st = open_stream(&model, &params, 1).unwrap();
        let mut out = Vec::new();
        let mut start = 0;
        for &c in &cuts {
            out.push(push_chunk(&model, &params, &mut st, &x.slice_rows(start, c).unwrap()).unwrap());
            start += c;
        }
        prop_assert_eq!(concat_frames(&out).unwrap(), offline);
    }

    #[test]
    fn streaming_outputs_ignore_the_future(seed in 0u64..1000, t_len in 2usize..24, at in 1usize..24, delta in -3.0f32..3.0) {
        prop_assume!(at < t_len && delta != 0.0);
        let (model, params) = tiny();
        let x = common::random(&mut Rng::new(seed), &[t_len, 3], 1.0);
        let mut data = x.data().to_vec();
        data[at * 3 + 1] += delta;
        let x2 = Tensor::new(&[t_len, 3], data).unwrap();
        let a = model.convert(&params, &x, 0, Mode::Streaming).unwrap();
        let b = model.convert(&params, &x2, 0, Mode::Streaming).unwrap();
        prop_assert_eq!(a.slice_rows(0, at).unwrap(), b.slice_rows(0, at).unwrap());
    }

    #[test]
    fn tempo_length_and_constants(t_len in 2usize..300, m in 0.8f64..=1.5, c in -5.0f32..5.0) {
        let x = Tensor::full(&[t_len, 2], c);
        let y = tempo_augment(&x, m).unwrap();
        prop_assert_eq!(y.rows(), (t_len as f64 / m).round() as usize);
        prop_assert!(y.data().iter().all(|&v| v == c));
    }

    #[test]
    fn negatives_are_distinct_and_exclude_positive(seed in 0u64..1000, t_len in 2usize..40, n_neg in 1usize..12, pos in 0usize..40) {
        prop_assume!(t_len > n_neg && pos < t_len);
        let negs = sample_negatives(&mut Rng::new(seed), t_len, pos, n_neg).unwrap();
        prop_assert_eq!(negs.len(), n_neg);
        prop_assert!(!negs.contains(&pos));
        let mut sorted = negs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n_neg);
        prop_assert!(negs.iter().all(|&n| n < t_len));
    }

    #[test]
    fn latency_is_chunk_plus_inference(chunk in 1.0f64..1000.0, rtf in 0.0f64..3.0) {
        let (inf, total) = predict_latency(chunk, rtf).unwrap();
        prop_assert!((total - (chunk + inf)).abs() <= 1e-9 * total);
    }

    #[test]
    fn flops_are_linear_in_frames(a in 1u64..5000, b in 1u64..5000) {
        let cfg = ModelConfig::default();
        for mode in Mode::BOTH {
            prop_assert_eq!(count_flops(&cfg, a + b, mode), count_flops(&cfg, a, mode) + count_flops(&cfg, b, mode));
        }
    }

    #[test]
    fn feature_files_round_trip(rows in 1usize..6, cols in 1usize..6, seed in 0u64..100, hop in 1.0f32..50.0) {
        let x = common::random(&mut Rng::new(seed), &[rows, cols], 2.0);
        let f = decode_features(&encode_features(&x, hop).unwrap()).unwrap();
        prop_assert_eq!(f.frames, x);
        prop_assert_eq!(f.hop_ms, hop);
    }
}
