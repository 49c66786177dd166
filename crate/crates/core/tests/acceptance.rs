//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test --release -p dualvc-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use dualvc::bench::{conv_flops, count_flops, depthwise_flops, predict_latency};
use dualvc::checks;
use dualvc::encoder::distillation_loss;
use dualvc::hpc::{apc_loss, cpc_loss, cpc_plan, HpcConfig, HpcHeads};
use dualvc::layers::{Mode, Session};
use dualvc::model::{Model, ModelConfig};
use dualvc::numerics::{ParamStore, Rng, Tensor};
use dualvc::streaming::verify_stream_equivalence;
use dualvc::synthdata::{generate_corpus, linear_oracle, Corpus, SynthCorpusConfig};
use dualvc::training::{conversion_mse, reconstruction_value, TrainConfig, Trainer};

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, id: &str, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("[FAIL] {id} {name}: {detail}");
            }
        }
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    if s < limit_s {
        Ok(format!("{detail} in {s:.1} s"))
    } else {
        Err(format!("{detail}, but took {s:.1} s (limit {limit_s} s)"))
    }
}

fn random_input(rng: &mut Rng, frames: usize, dim: usize) -> Tensor {
    common::random(rng, &[frames, dim], 1.0)
}

fn streaming_equivalence() -> Outcome {
    let start = Instant::now();
    let (model, params) = Model::new(&ModelConfig::default(), 1).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let x = random_input(&mut rng, 200, model.input_dim());
        let devs = verify_stream_equivalence(&model, &params, &x, i % model.speakers(), &[1, 4, 13, 16], Mode::Streaming)
            .map_err(|e| e.to_string())?;
        worst = devs.iter().map(|&(_, d)| d).fold(worst, f64::max);
    }
    let detail = format!("max |chunked - offline| = {worst:.3e} over chunks {{1, 4, 13, 16}} x 10 inputs");
    if worst > 1e-5 {
        return Err(detail);
    }
    within(start.elapsed(), 30.0, detail)
}

fn causality() -> Outcome {
    let start = Instant::now();
    let (model, params) = Model::new(&ModelConfig::default(), 2).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(12);
    let frames = 96;
    let mut moved = 0;
    for probe in 0..20 {
        let x = random_input(&mut rng, frames, model.input_dim());
        let t_prime = 1 + rng.below(frames - 1);
        let mut data = x.data().to_vec();
        let d = model.input_dim();
        for v in &mut data[t_prime * d..(t_prime + 1) * d] {
            *v += 1.0 + rng.standard_normal() as f32;
        }
        let x2 = Tensor::new(&[frames, d], data).map_err(|e| e.to_string())?;
        let spk = probe % model.speakers();
        let y = model.convert(&params, &x, spk, Mode::Streaming).map_err(|e| e.to_string())?;
        let y2 = model.convert(&params, &x2, spk, Mode::Streaming).map_err(|e| e.to_string())?;
        for t in 0..t_prime {
            if y.row(t) != y2.row(t) {
                return Err(format!("probe {probe}: perturbing frame {t_prime} changed output frame {t}"));
            }
        }
        if y.row(t_prime) != y2.row(t_prime) {
            moved += 1;
        }
    }
    within(
        start.elapsed(),
        10.0,
        format!("20 probes, earlier frames bit-identical ({moved}/20 perturbed frames changed their own output)"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = checks::run_suite().map_err(|e| e.to_string())?;
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty suite")?;
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    if !failing.is_empty() {
        return Err(format!("failing cases: {}", failing.join(", ")));
    }
    within(
        start.elapsed(),
        120.0,
        format!(
            "{} cases below {:.0e}, worst {} at {:.2e}",
            results.len(),
            checks::TOLERANCE,
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn detach_semantics() -> Outcome {
    let (model, params) = Model::new(&ModelConfig::default(), 3).map_err(|e| e.to_string())?;
    let x = random_input(&mut Rng::new(13), 40, model.input_dim());
    let mut s = Session::new(&params, false, Rng::new(0));
    let xv = s.input(x);
    let z = model.encoder.forward(&mut s, xv, Mode::Streaming).map_err(|e| e.to_string())?;
    let z_hat = model.encoder.forward(&mut s, xv, Mode::NonStreaming).map_err(|e| e.to_string())?;
    let loss = distillation_loss(&mut s.graph, z, z_hat).map_err(|e| e.to_string())?;
    let grads = s.graph.backward(loss).map_err(|e| e.to_string())?;
    let ns = model.encoder.branch_params(Mode::NonStreaming);
    let nonzero_ns: Vec<&str> = ns.iter().filter(|&&id| !grads.is_zero(id)).map(|&id| params.name(id)).collect();
    if !nonzero_ns.is_empty() {
        return Err(format!("non-causal branch gradients: {}", nonzero_ns.join(", ")));
    }
    let causal = model.encoder.branch_params(Mode::Streaming);
    let live = causal.iter().filter(|&&id| !grads.is_zero(id)).count();
    verdict(
        live > 0,
        format!(
            "{} non-causal-branch tensors exactly zero, {live}/{} causal-branch tensors nonzero",
            ns.len(),
            causal.len()
        ),
    )
}

fn latency_arithmetic() -> Outcome {
    let round3 = |v: f64| (v * 1000.0).round() / 1000.0;
    let (_, total) = predict_latency(160.0, 0.58).map_err(|e| e.to_string())?;
    let mut lines = vec![format!("total {:.3} ms", total)];
    let mut ok = round3(total) == 252.8;
    for (rtf, want) in [(0.26, 41.6), (0.12, 19.2), (0.20, 32.0), (0.58, 92.8)] {
        let (inference, _) = predict_latency(160.0, rtf).map_err(|e| e.to_string())?;
        ok &= round3(inference) == want;
        lines.push(format!("rtf {rtf} -> {inference:.3}"));
    }
    verdict(ok, lines.join(", "))
}

fn loss_oracles() -> Outcome {
    let (mut uniform, mut cpc, mut apc, mut rec) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for n_neg in [1, 3, 7, 8] {
        let cfg = HpcConfig {
            n_neg,
            ..HpcConfig::default()
        };
        let mut store = ParamStore::new();
        let h = HpcHeads::register(&mut store, &mut Rng::new(5), "hpc", 4, &cfg).map_err(|e| e.to_string())?;
        for &w in &h.cpc.score {
            let shape = store.get(w).shape().to_vec();
            store.set(w, Tensor::zeros(&shape)).map_err(|e| e.to_string())?;
        }
        let z = common::random(&mut Rng::new(6), &[16, 4], 1.0);
        let got = cpc_loss(&store, &h.cpc, &z, n_neg, &mut Rng::new(7)).map_err(|e| e.to_string())? as f64;
        uniform = uniform.max((got - ((n_neg + 1) as f64).ln()).abs());
    }
    let cfg = HpcConfig::default();
    let mut rng = Rng::new(3);
    for seed in 0..20u64 {
        let mut store = ParamStore::new();
        let h = HpcHeads::register(&mut store, &mut Rng::new(seed), "hpc", 4, &cfg).map_err(|e| e.to_string())?;
        let z = common::random(&mut Rng::new(1000 + seed), &[10, 4], 1.0);
        let got = cpc_loss(&store, &h.cpc, &z, cfg.n_neg, &mut Rng::new(seed)).map_err(|e| e.to_string())? as f64;
        let plan = cpc_plan(&mut Rng::new(seed), 10, cfg.m, cfg.n_neg).map_err(|e| e.to_string())?;
        cpc = cpc.max((got - common::cpc(&store, &h.cpc, &common::rows(&z), &plan)).abs());

        let mut store = ParamStore::new();
        let h = HpcHeads::register(&mut store, &mut Rng::new(seed), "hpc", 5, &cfg).map_err(|e| e.to_string())?;
        let z = common::random(&mut Rng::new(2000 + seed), &[6 + seed as usize, 5], 1.0);
        let got = apc_loss(&store, &h.apc, &z).map_err(|e| e.to_string())? as f64;
        apc = apc.max((got - common::apc(&store, &h.apc, &common::rows(&z))).abs());

        let shape = [1 + seed as usize, 1 + (seed as usize * 7) % 5];
        let y = common::random(&mut rng, &shape, 1.0);
        let y_hat = common::random(&mut rng, &shape, 1.0);
        let got = reconstruction_value(&y, &y_hat).map_err(|e| e.to_string())? as f64;
        rec = rec.max((got - common::mse(&y, &y_hat)).abs());
    }
    verdict(
        uniform.max(cpc).max(apc).max(rec) <= 1e-6,
        format!(
            "max |diff|: uniform CPC vs ln(n_neg+1) {uniform:.1e}, CPC {cpc:.1e}, APC {apc:.1e}, reconstruction {rec:.1e} (20 instances each)"
        ),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Variant {
    Default,
    NoDistill,
    NoArNoise,
}

struct RunResult {
    ns_mse: f64,
    s_mse: f64,
    drift: f64,
}

const AC7_STEPS: usize = 2000;
const DRIFT_FRAMES: usize = 2000;
const DRIFT_TAIL: usize = 200;

fn drift_mse(model: &Model, params: &ParamStore, set: &[(Tensor, usize, Tensor)]) -> dualvc::Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, spk, y) in set {
        let y_hat = model.convert(params, x, *spk, Mode::Streaming)?;
        let from = DRIFT_FRAMES - DRIFT_TAIL;
        for t in from..DRIFT_FRAMES {
            for (a, b) in y.row(t).iter().zip(y_hat.row(t)) {
                sum += ((a - b) as f64).powi(2);
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

fn train_run(corpus: &Corpus, drift_set: &[(Tensor, usize, Tensor)], variant: Variant, seed: u64) -> dualvc::Result<RunResult> {
    let mut cfg = ModelConfig::default();
    let mut train = TrainConfig {
        steps: AC7_STEPS,
        seed,
        ..TrainConfig::default()
    };
    match variant {
        Variant::Default => {}
        Variant::NoDistill => train.weights.distill = 0.0,
        Variant::NoArNoise => {
            cfg.decoder.ar_input_noise_std = 0.0;
            cfg.decoder.grad_noise_std = 0.0;
        }
    }
    let (model, params) = Model::new(&cfg, seed)?;
    let mut trainer = Trainer::new(model, params, train)?;
    let data = corpus.train_examples();
    for _ in 0..AC7_STEPS {
        trainer.train_on(&data)?;
    }
    let pairs = corpus.conversion_pairs();
    Ok(RunResult {
        ns_mse: conversion_mse(&trainer.model, &trainer.params, &pairs, Mode::NonStreaming)?,
        s_mse: conversion_mse(&trainer.model, &trainer.params, &pairs, Mode::Streaming)?,
        drift: drift_mse(&trainer.model, &trainer.params, drift_set)?,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn end_to_end(report: &mut Report) {
    let start = Instant::now();
    let fail_all = |report: &mut Report, msg: String| {
        for id in ["AC7a", "AC7b", "AC7c", "AC7"] {
            report.record(id, "end-to-end synthetic training", Err(msg.clone()));
        }
    };
    let corpus = match generate_corpus(&SynthCorpusConfig::default()) {
        Ok(c) => c,
        Err(e) => return fail_all(report, e.to_string()),
    };
    let mut oracle = 0.0;
    for k in 0..corpus.cfg.speakers {
        match linear_oracle(&corpus, k) {
            Ok(r) => oracle += r.mse / corpus.cfg.speakers as f64,
            Err(e) => return fail_all(report, e.to_string()),
        }
    }
    let mut rng = Rng::new(77);
    let mut drift_set = Vec::new();
    for k in 0..corpus.cfg.speakers {
        let source = (k + 1) % corpus.cfg.speakers;
        match corpus.sample_utterance(&mut rng, source, DRIFT_FRAMES) {
            Ok(u) => drift_set.push((u.bnf, k, u.targets[k].clone())),
            Err(e) => return fail_all(report, e.to_string()),
        }
    }
    let seeds = [0u64, 1, 2];
    let mut results = Vec::new();
    for variant in [Variant::Default, Variant::NoDistill, Variant::NoArNoise] {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let t = Instant::now();
            match train_run(&corpus, &drift_set, variant, seed) {
                Ok(r) => {
                    println!(
                        "       {variant:?} seed {seed}: NS MSE {:.5}, streaming MSE {:.5}, drift {:.5} ({:.1} s)",
                        r.ns_mse,
                        r.s_mse,
                        r.drift,
                        t.elapsed().as_secs_f64()
                    );
                    per_seed.push(r);
                }
                Err(e) => return fail_all(report, format!("{variant:?} seed {seed}: {e}")),
            }
        }
        results.push(per_seed);
    }
    let [default, no_distill, no_noise] = [&results[0], &results[1], &results[2]];
    let ns = median(&default.iter().map(|r| r.ns_mse).collect::<Vec<_>>());
    report.record(
        "AC7a",
        "non-streaming conversion vs linear oracle",
        verdict(
            ns <= 1.5 * oracle,
            format!(
                "median held-out NS MSE {ns:.5} vs 1.5 x oracle {:.5} (oracle {oracle:.5}, {:.1}x)",
                1.5 * oracle,
                ns / oracle
            ),
        ),
    );
    let with = median(&default.iter().map(|r| r.s_mse).collect::<Vec<_>>());
    let without = median(&no_distill.iter().map(|r| r.s_mse).collect::<Vec<_>>());
    report.record(
        "AC7b",
        "distillation helps streaming",
        verdict(
            with <= without,
            format!("median streaming MSE {with:.5} with distillation vs {without:.5} without"),
        ),
    );
    let with = median(&default.iter().map(|r| r.drift).collect::<Vec<_>>());
    let without = median(&no_noise.iter().map(|r| r.drift).collect::<Vec<_>>());
    report.record(
        "AC7c",
        "AR noise reduces long-form drift",
        verdict(
            with < without,
            format!("median last-{DRIFT_TAIL}-frame MSE on {DRIFT_FRAMES}-frame streams {with:.5} with noise vs {without:.5} without"),
        ),
    );
    report.record(
        "AC7",
        "end-to-end runtime",
        within(start.elapsed(), 900.0, format!("9 runs of {AC7_STEPS} steps")),
    );
}

fn flops_counter() -> Outcome {
    let pointwise = conv_flops(4, 2, 3, 1);
    let depthwise = depthwise_flops(4, 2, 3);
    let mut ok = pointwise == 48 && depthwise == 48;
    let mut cfg = ModelConfig::default();
    for bidirectional in [false, true] {
        cfg.encoder.bidirectional_noncausal_gru = bidirectional;
        for mode in [Mode::Streaming, Mode::NonStreaming] {
            let one = count_flops(&cfg, 1, mode);
            for t in [2u64, 7, 100, 1000] {
                ok &= count_flops(&cfg, t, mode) == t * one;
            }
            ok &= count_flops(&cfg, 1000, mode) == count_flops(&cfg, 600, mode) + count_flops(&cfg, 400, mode);
        }
    }
    cfg.encoder.bidirectional_noncausal_gru = false;
    ok &= count_flops(&cfg, 50, Mode::Streaming) == count_flops(&cfg, 50, Mode::NonStreaming);
    verdict(
        ok,
        format!(
            "pointwise {pointwise}, depthwise {depthwise}; count(T) = T x count(1) in both modes; {} FLOPs/frame",
            count_flops(&cfg, 1, Mode::Streaming)
        ),
    )
}

fn pipeline(dir: &std::path::Path) -> dualvc::Result<Vec<u8>> {
    use dualvc::synthdata::{encode_features, CorpusFiles};
    use dualvc::training::{load_checkpoint, save_checkpoint};
    let cfg = SynthCorpusConfig {
        utterances_per_speaker: 4,
        held_out_per_speaker: 1,
        frames: 80,
        seed: 9,
        ..SynthCorpusConfig::default()
    };
    generate_corpus(&cfg)?.write_dir(&dir.join("corpus"))?;
    let files = CorpusFiles::read_dir(&dir.join("corpus"))?;
    let (model, params) = Model::new(&ModelConfig::default(), 9)?;
    let mut trainer = Trainer::new(
        model,
        params,
        TrainConfig {
            steps: 50,
            seed: 9,
            ..TrainConfig::default()
        },
    )?;
    let data = files.train_examples();
    for _ in 0..50 {
        trainer.train_on(&data)?;
    }
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &trainer.model, &trainer.params, trainer.step())?;
    let loaded = load_checkpoint(&ckpt)?;
    let (_, held_out, bnf, _) = files.utterances.iter().find(|u| u.1).expect("held-out utterance");
    assert!(*held_out);
    let mut out = dualvc::training::encode_checkpoint(&loaded.model, &loaded.params, loaded.step)?;
    for mode in [Mode::Streaming, Mode::NonStreaming] {
        let y = loaded.model.convert(&loaded.params, bnf, 1, mode)?;
        out.extend(encode_features(&y, cfg.hop_ms)?);
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path()).map_err(|e| e.to_string())?;
    let second = pipeline(b.path()).map_err(|e| e.to_string())?;
    verdict(
        first == second,
        format!("synth -> 50 training steps -> checkpoint -> convert, {} bytes identical across two runs", first.len()),
    )
}

fn main() {
    let mut report = Report { failed: 0 };
    report.record("AC1", "streaming equivalence", streaming_equivalence());
    report.record("AC2", "causality", causality());
    report.record("AC3", "gradient suite", gradient_suite());
    report.record("AC4", "distillation detach semantics", detach_semantics());
    report.record("AC5", "latency arithmetic", latency_arithmetic());
    report.record("AC6", "loss-formula oracles", loss_oracles());
    report.record("AC8", "FLOPs counter", flops_counter());
    report.record("AC9", "pipeline determinism", determinism());
    end_to_end(&mut report);
    if report.failed > 0 {
        println!("{} criterion line(s) failed", report.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
