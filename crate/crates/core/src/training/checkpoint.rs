//! Model checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DVCM" | version | header length | header JSON {config, step}
//! then per tensor, until end of file:
//! name length | name bytes | ndim | dims… | f32 payload
//! ```
//!
//! Only inference parameters are stored; the predictive coding heads are
//! re-initialised on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DVCM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub step: u64,
}

pub fn encode_checkpoint(model: &Model, params: &ParamStore, step: u64) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        step,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, name, t) in params.iter().take(model.inference_params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model, params: &ParamStore, step: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, params, step)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a model checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = r.u32("header length")? as usize;
    let at = r.pos;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::format(at as u64, format!("header: {e}")))?;
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let at = r.pos as u64;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::format(at, format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate tensor `{name}`")));
        }
    }
    let end = bytes.len() as u64;
    let (model, mut params) = Model::new(&header.config, 0)?;
    let ids: Vec<_> = params.ids().take(model.inference_params).collect();
    for id in ids {
        let name = params.name(id).to_string();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::format(end, format!("missing tensor `{name}`")))?;
        params
            .set(id, t)
            .map_err(|e| Error::format(end, format!("tensor `{name}`: {e}")))?;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::format(end, format!("unexpected tensor `{name}`")));
    }
    Ok(Checkpoint {
        model,
        params,
        step: header.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
