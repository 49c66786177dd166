//! `dualvc`: synthetic data, training, conversion, streaming and
//! benchmarking for the dual-mode voice-conversion model.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dualvc", version, about = "Dual-mode streaming voice conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Streaming,
    NonStreaming,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus.
    SynthData {
        /// JSON corpus config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a corpus directory and write a checkpoint.
    Train {
        /// JSON with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed (also used for initialization).
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step loss CSV; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Offline conversion of a feature file.
    Convert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        speaker: usize,
        #[arg(long, value_enum, default_value = "streaming")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chunked streaming conversion with per-chunk timing.
    Stream {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        speaker: usize,
        #[arg(long, default_value_t = 160.0)]
        chunk_ms: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check chunked streaming against offline streaming inference.
    Verify {
        /// Checkpoint; a freshly initialized default model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Feature file; random frames when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        chunk_frames: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Measure real-time factor and report latency and FLOPs.
    Bench {
        /// Checkpoint; a freshly initialized default model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 160.0)]
        chunk_ms: f64,
        /// Input length in frames.
        #[arg(long, default_value_t = 400)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Time a sleeping stub with this real-time factor instead of the
        /// model, and report latency at exactly this factor.
        #[arg(long)]
        rtf: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
