use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dualvc::bench::{
    chunk_frames, flops_per_second, measure_rtf, LatencyReport, SleepWorkload, StreamWorkload, Workload, HOP_MS,
};
use dualvc::layers::Mode;
use dualvc::model::{Model, ModelConfig};
use dualvc::numerics::{ParamStore, Rng, Tensor};
use dualvc::streaming::{concat_frames, stream_all, verify_stream_equivalence};
use dualvc::synthdata::{generate_corpus, read_features, write_features, CorpusFiles, SynthCorpusConfig};
use dualvc::training::{load_checkpoint, save_checkpoint, LossBreakdown, TrainConfig, Trainer};

use crate::manifest::{beside, Manifest};
use crate::{Command, ModeArg};

pub enum Status {
    Ok,
    Failed,
}

/// Contents of the `train --config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn run(cmd: Command) -> Result<Status> {
    match cmd {
        Command::SynthData { config, out, seed } => synth_data(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            log,
        } => train(config.as_deref(), &data, &out, seed, log),
        Command::Convert {
            model,
            input,
            speaker,
            mode,
            out,
        } => convert(&model, &input, speaker, mode, &out),
        Command::Stream {
            model,
            input,
            speaker,
            chunk_ms,
            out,
        } => stream(&model, &input, speaker, chunk_ms, &out),
        Command::Verify {
            model,
            input,
            chunk_frames,
            speaker,
            seed,
            frames,
            tolerance,
        } => verify(model.as_deref(), input.as_deref(), &chunk_frames, speaker, seed, frames, tolerance),
        Command::Bench {
            model,
            chunk_ms,
            frames,
            repetitions,
            rtf,
            seed,
        } => bench(model.as_deref(), chunk_ms, frames, repetitions, rtf, seed),
        Command::Gradcheck => gradcheck(),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn load_model(path: Option<&Path>, seed: u64) -> Result<(Model, ParamStore)> {
    match path {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading model {}", p.display()))?;
            Ok((ckpt.model, ckpt.params))
        }
        None => Ok(Model::new(&ModelConfig::default(), seed)?),
    }
}

fn read_input(path: &Path) -> Result<(Tensor, f64)> {
    let f = read_features(path).with_context(|| format!("reading features {}", path.display()))?;
    Ok((f.frames, f.hop_ms as f64))
}

fn synth_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Status> {
    let mut cfg: SynthCorpusConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg)?;
    corpus.write_dir(out)?;
    let mut manifest = Manifest::new("synth-data", Some(cfg.seed), serde_json::to_value(&cfg)?).output(out);
    if let Some(c) = config {
        manifest = manifest.input(c);
    }
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "wrote {} utterances x {} speakers to {}",
        corpus.utterances.len(),
        cfg.speakers,
        out.display()
    );
    Ok(Status::Ok)
}

fn check_dims(model: &ModelConfig, data: &SynthCorpusConfig) -> Result<()> {
    let pairs = [
        ("encoder.input_dim", model.encoder.input_dim, "content_dim", data.content_dim),
        ("decoder.output_dim", model.decoder.output_dim, "feature_dim", data.feature_dim),
        ("decoder.speakers", model.decoder.speakers, "speakers", data.speakers),
    ];
    for (m, mv, d, dv) in pairs {
        if mv != dv {
            bail!("model {m} = {mv} does not match corpus {d} = {dv}");
        }
    }
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, log: Option<PathBuf>) -> Result<Status> {
    let mut file: TrainFile = read_config(config)?;
    if let Some(s) = seed {
        file.train.seed = s;
    }
    let corpus = CorpusFiles::read_dir(data).with_context(|| format!("reading corpus {}", data.display()))?;
    check_dims(&file.model, &corpus.cfg)?;
    let examples = corpus.train_examples();
    let (model, params) = Model::new(&file.model, file.train.seed)?;
    let mut trainer = Trainer::new(model, params, file.train.clone())?;
    let log = log.unwrap_or_else(|| out.with_extension("csv"));
    let mut csv = BufWriter::new(File::create(&log).with_context(|| format!("creating log {}", log.display()))?);
    writeln!(csv, "{}", LossBreakdown::CSV_HEADER)?;
    let steps = file.train.steps;
    let every = (steps / 10).max(1);
    for i in 0..steps {
        let r = trainer.train_on(&examples)?;
        writeln!(csv, "{}", r.losses.csv_row(r.step))?;
        if i % every == 0 || i + 1 == steps {
            println!("step {:>6}  L_total {:.5}", r.step, r.losses.total);
        }
    }
    csv.flush()?;
    save_checkpoint(out, &trainer.model, &trainer.params, trainer.step())?;
    let mut manifest = Manifest::new("train", Some(file.train.seed), serde_json::to_value(&file)?)
        .input(data)
        .output(out)
        .output(&log);
    if let Some(c) = config {
        manifest = manifest.input(c);
    }
    manifest.write(&beside(out))?;
    println!("wrote {} after {} steps", out.display(), trainer.step());
    Ok(Status::Ok)
}

fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Streaming => Mode::Streaming,
        ModeArg::NonStreaming => Mode::NonStreaming,
    }
}

fn convert(model: &Path, input: &Path, speaker: usize, mode: ModeArg, out: &Path) -> Result<Status> {
    let (m, params) = load_model(Some(model), 0)?;
    let (x, hop) = read_input(input)?;
    let y = m.convert(&params, &x, speaker, mode_of(mode))?;
    write_features(out, &y, hop as f32)?;
    let config = serde_json::json!({ "speaker": speaker, "mode": format!("{mode:?}") });
    Manifest::new("convert", None, config)
        .input(model)
        .input(input)
        .output(out)
        .write(&beside(out))?;
    println!("converted {} frames to speaker {speaker}", y.rows());
    Ok(Status::Ok)
}

fn stream(model: &Path, input: &Path, speaker: usize, chunk_ms: f64, out: &Path) -> Result<Status> {
    let (m, params) = load_model(Some(model), 0)?;
    let (x, hop) = read_input(input)?;
    let chunk = chunk_frames(chunk_ms, hop)?;
    let results = stream_all(&m, &params, &x, speaker, chunk)?;
    let mut elapsed = 0.0;
    for (i, r) in results.iter().enumerate() {
        let ms = r.elapsed.as_secs_f64() * 1000.0;
        elapsed += ms;
        println!("chunk {i:>4}  frames {:>4}  {ms:.3} ms", r.frames.rows());
    }
    let y = concat_frames(&results)?;
    write_features(out, &y, hop as f32)?;
    let duration_ms = x.rows() as f64 * hop;
    let report = LatencyReport::new(chunk as f64 * hop, elapsed / duration_ms, flops_per_second(&m.cfg, hop, Mode::Streaming))?;
    print!("{}", report.to_kv());
    let config = serde_json::json!({ "speaker": speaker, "chunk_ms": chunk_ms, "chunk_frames": chunk });
    Manifest::new("stream", None, config)
        .input(model)
        .input(input)
        .output(out)
        .write(&beside(out))?;
    Ok(Status::Ok)
}

fn verify(
    model: Option<&Path>,
    input: Option<&Path>,
    chunks: &[usize],
    speaker: usize,
    seed: u64,
    frames: usize,
    tolerance: f64,
) -> Result<Status> {
    let (m, params) = load_model(model, seed)?;
    let x = match input {
        Some(p) => read_input(p)?.0,
        None => {
            if frames == 0 {
                bail!("--frames must be positive");
            }
            let mut rng = Rng::new(seed ^ 0x5eed);
            let data = (0..frames * m.input_dim()).map(|_| rng.standard_normal() as f32).collect();
            Tensor::new(&[frames, m.input_dim()], data)?
        }
    };
    let devs = verify_stream_equivalence(&m, &params, &x, speaker, chunks, Mode::Streaming)?;
    let mut ok = true;
    for (c, d) in devs {
        let pass = d <= tolerance;
        ok &= pass;
        println!("chunk {c:>4}  max_abs_dev {d:.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { Status::Ok } else { Status::Failed })
}

fn bench(
    model: Option<&Path>,
    chunk_ms: f64,
    frames: usize,
    repetitions: usize,
    forced: Option<f64>,
    seed: u64,
) -> Result<Status> {
    let (m, params) = load_model(model, seed)?;
    if frames == 0 {
        bail!("--frames must be positive");
    }
    let hop = HOP_MS;
    let chunk = chunk_frames(chunk_ms, hop)?;
    let mut rng = Rng::new(seed ^ 0xbe9c);
    let data = (0..frames * m.input_dim()).map(|_| rng.standard_normal() as f32).collect();
    let x = Tensor::new(&[frames, m.input_dim()], data)?;
    let mut workload: Box<dyn Workload + '_> = match forced {
        Some(rtf) => Box::new(SleepWorkload { frames, hop_ms: hop, rtf }),
        None => Box::new(StreamWorkload {
            model: &m,
            params: &params,
            input: &x,
            speaker: 0,
            chunk,
        }),
    };
    let stats = measure_rtf(workload.as_mut(), hop, repetitions)?;
    println!("workload={}", if forced.is_some() { "sleep-stub" } else { "stream" });
    println!("measured_rtf_min={:.4}", stats.min);
    println!("measured_rtf_median={:.4}", stats.median);
    println!("measured_rtf_max={:.4}", stats.max);
    let rtf = forced.unwrap_or(stats.median);
    let report = LatencyReport::new(chunk_ms, rtf, flops_per_second(&m.cfg, hop, Mode::Streaming))?;
    print!("{}", report.to_kv());
    Ok(Status::Ok)
}

fn gradcheck() -> Result<Status> {
    let results = dualvc::checks::run_suite()?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<40} max_rel_err {:.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{} cases, tolerance {:.0e}", results.len(), dualvc::checks::TOLERANCE);
    Ok(if ok { Status::Ok } else { Status::Failed })
}
