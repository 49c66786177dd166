use dualvc::model::{Model, ModelConfig};
use dualvc::synthdata::{generate_corpus, SynthCorpusConfig};
use dualvc::training::{TrainConfig, Trainer};

/// Mean L_total over the first and last ten of 200 steps.
fn first_and_last(seed: u64) -> (f64, f64) {
    let corpus = generate_corpus(&SynthCorpusConfig::default()).unwrap();
    let examples = corpus.train_examples();
    let (model, params) = Model::new(&ModelConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        seed,
        steps: 200,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, params, cfg).unwrap();
    let totals: Vec<f64> = (0..200).map(|_| trainer.train_on(&examples).unwrap().losses.total as f64).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&totals[..10]), mean(&totals[190..]))
}

#[test]
fn two_hundred_steps_reduce_total_loss() {
    let mut ratios: Vec<f64> = (0..3)
        .map(|seed| {
            let (first, last) = first_and_last(seed);
            assert!(first.is_finite() && last.is_finite());
            last / first
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 1.0, "median final/initial = {}", ratios[1]);
}
