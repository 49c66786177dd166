//! Feature files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DVCF"
//! 4       4     version (u32 LE, = 1)
//! 8       4     frames T (u32 LE)
//! 12      4     dimension D (u32 LE)
//! 16      4     hop in ms (f32 LE)
//! 20      4·T·D row-major f32 LE frames
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DVCF";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub frames: Tensor,
    pub hop_ms: f32,
}

pub fn encode_features(frames: &Tensor, hop_ms: f32) -> Result<Vec<u8>> {
    if frames.shape().len() != 2 {
        return Err(Error::shape(format!("feature frames must be [T×D], got {:?}", frames.shape())));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    out.extend_from_slice(&hop_ms.to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    if bytes.len() < HEADER {
        return Err(Error::format(bytes.len() as u64, format!("truncated header ({} of {HEADER} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, not a feature file"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let version = u32::from_le_bytes(word(4));
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let t = u32::from_le_bytes(word(8)) as usize;
    let d = u32::from_le_bytes(word(12)) as usize;
    let hop_ms = f32::from_le_bytes(word(16));
    if t == 0 || d == 0 {
        return Err(Error::format(8, format!("empty frame matrix {t}×{d}")));
    }
    if !(hop_ms > 0.0) || !hop_ms.is_finite() {
        return Err(Error::format(16, format!("invalid hop {hop_ms} ms")));
    }
    let expect = HEADER + 4 * t * d;
    if bytes.len() != expect {
        return Err(Error::format(
            bytes.len().min(expect) as u64,
            format!("payload of {} bytes, expected {}", bytes.len() - HEADER, expect - HEADER),
        ));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let frames = Tensor::new(&[t, d], data).map_err(|e| Error::format(HEADER as u64, e.to_string()))?;
    Ok(FeatureFile { frames, hop_ms })
}

pub fn write_features(path: &Path, frames: &Tensor, hop_ms: f32) -> Result<()> {
    let bytes = encode_features(frames, hop_ms)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 0.25, 3.0, -0.125]).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dvcf");
        write_features(&p, &sample(), 12.5).unwrap();
        let f = read_features(&p).unwrap();
        assert_eq!(f.frames, sample());
        assert_eq!(f.hop_ms, 12.5);
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = encode_features(&sample(), 12.5).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_features(cut), Err(Error::Format { offset: 43, .. })));
        assert!(matches!(decode_features(&bytes[..7]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 4, .. })));
    }
}
