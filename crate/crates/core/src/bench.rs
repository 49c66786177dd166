//! Computational-efficiency measurement: analytic FLOPs, measured real-time
//! factor and chunk latency.
//!
//! A multiply-accumulate counts as two FLOPs. Counted terms:
//!
//! - convolution `2·T·C_in·C_out·k`
//! - depthwise convolution `2·T·C·k`
//! - linear layer `2·T·in·out`
//! - GRU `T·(2·3H·(I+H) + 10H)`: the two gate matmuls plus, per step, 3H
//!   gate sums, H reset products, 3H nonlinearities and 3H for the
//!   interpolation `n + z⊙(h − n)`
//!
//! Normalisation, activations, pooling and highway gating are not counted.

use std::time::{Duration, Instant};

use crate::encoder::EncoderConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::streaming;

/// Default frame hop in milliseconds.
pub const HOP_MS: f64 = 12.5;

/// `(inference_ms, total_ms)` for a chunk: `chunk·rtf` and `chunk·(1 + rtf)`.
pub fn predict_latency(chunk_ms: f64, rtf: f64) -> Result<(f64, f64)> {
    if !(chunk_ms > 0.0) || !chunk_ms.is_finite() {
        return Err(Error::Argument(format!("chunk duration must be positive, got {chunk_ms}")));
    }
    if !(rtf >= 0.0) || !rtf.is_finite() {
        return Err(Error::Argument(format!("real-time factor must be non-negative, got {rtf}")));
    }
    Ok((chunk_ms * rtf, chunk_ms * (1.0 + rtf)))
}

/// Chunk length in frames for a duration, rounded to nearest.
pub fn chunk_frames(chunk_ms: f64, hop_ms: f64) -> Result<usize> {
    if !(chunk_ms > 0.0) || !(hop_ms > 0.0) {
        return Err(Error::Argument("chunk and hop durations must be positive".into()));
    }
    Ok(((chunk_ms / hop_ms).round() as usize).max(1))
}

pub fn conv_flops(frames: u64, c_in: u64, c_out: u64, k: u64) -> u64 {
    2 * frames * c_in * c_out * k
}

pub fn depthwise_flops(frames: u64, channels: u64, k: u64) -> u64 {
    2 * frames * channels * k
}

pub fn linear_flops(frames: u64, input: u64, output: u64) -> u64 {
    2 * frames * input * output
}

pub fn gru_flops(frames: u64, input: u64, hidden: u64) -> u64 {
    frames * (2 * 3 * hidden * (input + hidden) + 10 * hidden)
}

fn basic_conv_flops(t: u64, c_in: usize, channels: usize, c_out: usize, k: usize) -> u64 {
    conv_flops(t, c_in as u64, channels as u64, 1)
        + depthwise_flops(t, channels as u64, k as u64)
        + conv_flops(t, channels as u64, c_out as u64, 1)
}

fn encoder_flops(cfg: &EncoderConfig, t: u64, mode: Mode) -> u64 {
    let d = cfg.input_dim;
    let mut n = 0;
    for &k in &cfg.bank_kernel_sizes {
        n += basic_conv_flops(t, d, cfg.bank_channels, cfg.bank_channels, k);
    }
    let bank_out = cfg.bank_channels * cfg.bank_kernel_sizes.len();
    let p = cfg.projection_channels;
    n += basic_conv_flops(t, bank_out, p, p, cfg.depthwise_kernel);
    n += basic_conv_flops(t, p, p, d, cfg.depthwise_kernel);
    n += cfg.highway_layers as u64 * 2 * linear_flops(t, d as u64, d as u64);
    let grus = if cfg.bidirectional_noncausal_gru && mode == Mode::NonStreaming { 2 } else { 1 };
    n + grus * gru_flops(t, d as u64, cfg.gru_hidden as u64)
}

fn decoder_flops(cfg: &DecoderConfig, latent: usize, t: u64) -> u64 {
    let mut n = 0;
    let mut c_in = latent + cfg.speaker_dim;
    for _ in 0..cfg.conv_layers {
        n += basic_conv_flops(t, c_in, cfg.conv_channels, cfg.conv_channels, cfg.depthwise_kernel);
        c_in = cfg.conv_channels;
    }
    let mut p_in = cfg.output_dim;
    for &p in &cfg.prenet {
        n += linear_flops(t, p_in as u64, p as u64);
        p_in = p;
    }
    let conv = if cfg.conv_layers == 0 { 0 } else { cfg.conv_channels };
    let cond = conv + latent + cfg.speaker_dim;
    n += gru_flops(t, (p_in + cond) as u64, cfg.gru_hidden as u64);
    n + linear_flops(t, (cfg.gru_hidden + cond) as u64, cfg.output_dim as u64)
}

/// Analytic inference FLOPs of the active `mode` over `frames` frames.
pub fn count_flops(cfg: &ModelConfig, frames: u64, mode: Mode) -> u64 {
    encoder_flops(&cfg.encoder, frames, mode) + decoder_flops(&cfg.decoder, cfg.encoder.gru_hidden, frames)
}

/// Something whose wall-clock cost per run can be measured.
pub trait Workload {
    /// Input frames covered by one run.
    fn frames(&self) -> usize;
    fn run(&mut self) -> Result<()>;
}

/// Sleeps for a fixed fraction of the input duration.
pub struct SleepWorkload {
    pub frames: usize,
    pub hop_ms: f64,
    pub rtf: f64,
}

impl Workload for SleepWorkload {
    fn frames(&self) -> usize {
        self.frames
    }

    fn run(&mut self) -> Result<()> {
        let secs = self.frames as f64 * self.hop_ms / 1000.0 * self.rtf;
        std::thread::sleep(Duration::from_secs_f64(secs));
        Ok(())
    }
}

/// Streaming conversion of a fixed input in chunks of `chunk` frames.
pub struct StreamWorkload<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub input: &'a Tensor,
    pub speaker: usize,
    pub chunk: usize,
}

impl Workload for StreamWorkload<'_> {
    fn frames(&self) -> usize {
        self.input.rows()
    }

    fn run(&mut self) -> Result<()> {
        streaming::stream_all(self.model, self.params, self.input, self.speaker, self.chunk)?;
        Ok(())
    }
}

/// Offline conversion of a fixed input in either mode.
pub struct OfflineWorkload<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub input: &'a Tensor,
    pub speaker: usize,
    pub mode: Mode,
}

impl Workload for OfflineWorkload<'_> {
    fn frames(&self) -> usize {
        self.input.rows()
    }

    fn run(&mut self) -> Result<()> {
        self.model.convert(self.params, self.input, self.speaker, self.mode)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtfStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

/// Real-time factor over `repetitions` timed runs after one untimed warm-up.
pub fn measure_rtf(workload: &mut dyn Workload, hop_ms: f64, repetitions: usize) -> Result<RtfStats> {
    if repetitions < 3 {
        return Err(Error::Argument(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let duration = workload.frames() as f64 * hop_ms / 1000.0;
    if !(duration > 0.0) {
        return Err(Error::Argument("workload covers no input".into()));
    }
    workload.run()?;
    let mut rtfs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        workload.run()?;
        rtfs.push(start.elapsed().as_secs_f64() / duration);
    }
    rtfs.sort_by(f64::total_cmp);
    let n = rtfs.len();
    let median = if n % 2 == 1 {
        rtfs[n / 2]
    } else {
        0.5 * (rtfs[n / 2 - 1] + rtfs[n / 2])
    };
    Ok(RtfStats {
        min: rtfs[0],
        median,
        max: rtfs[n - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyReport {
    pub chunk_ms: f64,
    pub rtf: f64,
    pub inference_latency_ms: f64,
    pub total_latency_ms: f64,
    /// FLOPs per second of input.
    pub flops: u64,
}

impl LatencyReport {
    pub fn new(chunk_ms: f64, rtf: f64, flops: u64) -> Result<Self> {
        let (inference_latency_ms, total_latency_ms) = predict_latency(chunk_ms, rtf)?;
        Ok(Self {
            chunk_ms,
            rtf,
            inference_latency_ms,
            total_latency_ms,
            flops,
        })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "chunk_ms={}\nrtf={:.4}\ninference_latency_ms={:.3}\ntotal_latency_ms={:.3}\nflops_per_second={}\ngflops_per_second={:.6}\n",
            self.chunk_ms,
            self.rtf,
            self.inference_latency_ms,
            self.total_latency_ms,
            self.flops,
            self.flops as f64 / 1e9
        )
    }
}

/// FLOPs for one second of input at `hop_ms`.
pub fn flops_per_second(cfg: &ModelConfig, hop_ms: f64, mode: Mode) -> u64 {
    count_flops(cfg, (1000.0 / hop_ms).round() as u64, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_arithmetic() {
        let (_, total) = predict_latency(160.0, 0.58).unwrap();
        assert!((total - 252.8).abs() < 1e-9);
        let (inf, _) = predict_latency(160.0, 0.12).unwrap();
        assert!((inf - 19.2).abs() < 1e-9);
        assert_eq!(predict_latency(160.0, 0.0).unwrap(), (0.0, 160.0));
        assert!(predict_latency(0.0, 0.1).is_err());
        assert!(predict_latency(160.0, -0.1).is_err());
    }

    #[test]
    fn hand_counted_micro_cases() {
        assert_eq!(conv_flops(4, 2, 3, 1), 48);
        assert_eq!(depthwise_flops(4, 2, 3), 48);
        assert_eq!(linear_flops(1, 2, 3), 12);
        assert_eq!(gru_flops(1, 1, 1), 2 * 3 * 2 + 10);
    }

    #[test]
    fn counts_are_linear_and_mode_symmetric() {
        let cfg = ModelConfig::default();
        for mode in Mode::BOTH {
            assert_eq!(count_flops(&cfg, 200, mode), 2 * count_flops(&cfg, 100, mode));
        }
        assert_eq!(count_flops(&cfg, 80, Mode::Streaming), count_flops(&cfg, 80, Mode::NonStreaming));
        let mut bi = cfg.clone();
        bi.encoder.bidirectional_noncausal_gru = true;
        assert!(count_flops(&bi, 80, Mode::NonStreaming) > count_flops(&bi, 80, Mode::Streaming));
    }

    #[test]
    fn chunk_rounding() {
        assert_eq!(chunk_frames(160.0, HOP_MS).unwrap(), 13);
        assert_eq!(chunk_frames(12.5, HOP_MS).unwrap(), 1);
    }

    #[test]
    fn sleep_workload_rtf() {
        let mut w = SleepWorkload {
            frames: 8,
            hop_ms: HOP_MS,
            rtf: 0.5,
        };
        let s = measure_rtf(&mut w, HOP_MS, 3).unwrap();
        assert!((s.median - 0.5).abs() <= 0.05, "{s:?}");
        assert!(s.min <= s.median && s.median <= s.max);
    }

    #[test]
    fn report_lines() {
        let r = LatencyReport::new(160.0, 0.58, 1_000).unwrap();
        assert!(r.to_kv().contains("total_latency_ms=252.800\n"));
    }
}
