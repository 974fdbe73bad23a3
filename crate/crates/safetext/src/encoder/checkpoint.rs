//! Binary encoder checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STXT" | version: u32 | meta_len: u64 | meta: UTF-8 JSON | param data...
//! ```
//!
//! The meta document carries the config, the vocabulary, the frozen flag,
//! and the declared (name, shape) list; parameter arrays follow as raw
//! little-endian `f64` in exactly that order. Round trips are bit-exact.
//! Every corruption class maps to its own [`CheckpointError`] variant, and
//! any strict prefix of a valid file fails to load (the expected total size
//! is derivable from the header, so truncation is always detectable).

use super::{EncoderConfig, EncoderState, Vocab};
use crate::error::{CheckpointError, Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: [u8; 4] = *b"STXT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: EncoderConfig,
    vocab: Vocab,
    frozen: bool,
    params: Vec<ParamDesc>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

/// Serialize a state to bytes.
pub fn to_bytes(state: &EncoderState) -> Result<Vec<u8>> {
    let meta = Meta {
        config: state.config.clone(),
        vocab: state.vocab.clone(),
        frozen: state.frozen,
        params: state
            .param_list()
            .iter()
            .map(|(name, t)| ParamDesc {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Numeric(format!("meta encode: {e}")))?;
    let mut out = Vec::with_capacity(meta_bytes.len() + 64);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (_, t) in state.param_list() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(state: &EncoderState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Cursor over a byte slice where running out of bytes means "truncated".
struct Take<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Take<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(format!(
                "while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Deserialize a state from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<EncoderState> {
    let mut r = Take { buf: bytes, pos: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(CheckpointError::BadMagic { found }.into());
    }
    let version = u32::from_le_bytes(r.bytes(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let meta_len = u64::from_le_bytes(r.bytes(8, "meta length")?.try_into().unwrap());
    let meta_len = usize::try_from(meta_len)
        .map_err(|_| CheckpointError::MalformedHeader("meta length overflows".into()))?;
    let meta_bytes = r.bytes(meta_len, "meta document")?;
    let meta: Meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| CheckpointError::MalformedHeader(format!("meta JSON: {e}")))?;

    // Shapes implied by (config, vocab) are the ground truth; the declared
    // list must match them exactly.
    let mut state = EncoderState::zeros(meta.config.clone(), meta.vocab.clone())
        .map_err(|e| CheckpointError::MalformedHeader(format!("config invalid: {e}")))?;
    state.frozen = meta.frozen;
    {
        let expected = state.param_list();
        if expected.len() != meta.params.len() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "declared {} parameters, config implies {}",
                meta.params.len(),
                expected.len()
            ))
            .into());
        }
        for ((name, t), desc) in expected.iter().zip(&meta.params) {
            if *name != desc.name || t.shape != desc.shape {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "parameter {:?} shape {:?}, expected {:?} shape {:?}",
                    desc.name, desc.shape, name, t.shape
                ))
                .into());
            }
        }
    }
    for (name, t) in state.param_list_mut() {
        let n = t.data.len();
        let raw = r.bytes(n * 8, &format!("parameter {name}"))?;
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            t.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::MalformedHeader(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - r.pos
        ))
        .into());
    }
    // Restore the requires-grad flags implied by `frozen`.
    let state = if meta.frozen {
        state.frozen_copy()
    } else {
        state.trainable_copy()
    };
    Ok(state)
}

pub fn load(path: &Path) -> Result<EncoderState> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
