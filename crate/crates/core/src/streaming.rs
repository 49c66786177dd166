//! Chunked streaming inference.
//!
//! A [`StreamState`] carries everything a streaming-mode model needs
//! between chunks: the raw input frames each causal convolution still has
//! to see, the max-pool's previous frame, every GRU hidden state and the
//! last generated frame. Chunks of any size produce the same frames as an
//! offline streaming-mode run over the concatenated input.

use std::time::{Duration, Instant};

use crate::decoder::DecoderState;
use crate::encoder::EncoderStreamState;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub speaker: usize,
    pub embedding: Vec<f32>,
    pub encoder: EncoderStreamState,
    pub decoder: DecoderState,
    pub frames_processed: u64,
}

impl StreamState {
    /// Bytes held by carried buffers; independent of stream length.
    pub fn byte_size(&self) -> usize {
        self.encoder.byte_size() + self.decoder.byte_size() + self.embedding.len() * 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkResult {
    /// Converted frames, one per input frame.
    pub frames: Tensor,
    pub elapsed: Duration,
}

/// Fresh zero state for converting to `speaker`.
pub fn open_stream(model: &Model, params: &ParamStore, speaker: usize) -> Result<StreamState> {
    let embedding = model.decoder.speakers.lookup(params, speaker)?.into_data();
    Ok(StreamState {
        speaker,
        embedding,
        encoder: model.encoder.new_stream_state(),
        decoder: model.decoder.new_state(Mode::Streaming),
        frames_processed: 0,
    })
}

/// Converts one chunk of `[c×D_in]` frames.
pub fn push_chunk(model: &Model, params: &ParamStore, state: &mut StreamState, chunk: &Tensor) -> Result<ChunkResult> {
    if chunk.shape().len() != 2 {
        return Err(Error::shape(format!("chunk must be [c×D], got {:?}", chunk.shape())));
    }
    if chunk.rows() == 0 {
        return Err(Error::Argument("empty chunk".into()));
    }
    model.check_features(chunk)?;
    let start = Instant::now();
    let latent = model.encoder.forward_chunk(params, &mut state.encoder, chunk.data())?;
    let out = model
        .decoder
        .decode_chunk(params, &mut state.decoder, &latent, &state.embedding)?;
    let elapsed = start.elapsed();
    state.frames_processed += chunk.rows() as u64;
    Ok(ChunkResult {
        frames: Tensor::new(&[chunk.rows(), model.output_dim()], out)?,
        elapsed,
    })
}

/// Streams `input` in chunks of `chunk` frames (the last may be shorter)
/// and returns every chunk result.
pub fn stream_all(
    model: &Model,
    params: &ParamStore,
    input: &Tensor,
    speaker: usize,
    chunk: usize,
) -> Result<Vec<ChunkResult>> {
    if chunk == 0 {
        return Err(Error::Argument("chunk size must be at least one frame".into()));
    }
    let mut state = open_stream(model, params, speaker)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < input.rows() {
        let len = chunk.min(input.rows() - start);
        out.push(push_chunk(model, params, &mut state, &input.slice_rows(start, len)?)?);
        start += len;
    }
    Ok(out)
}

/// Joins chunk outputs along time.
pub fn concat_frames(results: &[ChunkResult]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = results.iter().map(|r| &r.frames).collect();
    Tensor::concat_rows(&parts)
}

/// Max-abs deviation between chunked and offline streaming-mode conversion
/// for each chunk size.
pub fn verify_stream_equivalence(
    model: &Model,
    params: &ParamStore,
    input: &Tensor,
    speaker: usize,
    chunk_sizes: &[usize],
    mode: Mode,
) -> Result<Vec<(usize, f64)>> {
    if mode != Mode::Streaming {
        return Err(Error::Mode(
            "non-streaming branches read future frames and cannot run chunk by chunk".into(),
        ));
    }
    let offline = model.convert(params, input, speaker, Mode::Streaming)?;
    chunk_sizes
        .iter()
        .map(|&c| {
            let chunked = concat_frames(&stream_all(model, params, input, speaker, c)?)?;
            Ok((c, chunked.max_abs_diff(&offline)?))
        })
        .collect()
}
