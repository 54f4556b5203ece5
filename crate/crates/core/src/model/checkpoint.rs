//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, length-prefixed JSON header (model config,
//! variant, vocabulary hash), parameter blocks (name, shape, row-major f32
//! little-endian values), and a trailing checksum of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerLM};
use crate::error::{Error, Result};
use crate::sequencing::Variant;

const MAGIC: &[u8; 8] = b"TSCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    variant: Variant,
    vocab_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerLM<f32>,
    pub variant: Variant,
    pub vocab_hash: String,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn encode_checkpoint(model: &TransformerLM<f32>, variant: Variant, vocab_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = Header {
        config: model.config().clone(),
        variant,
        vocab_hash: vocab_hash.to_owned(),
    };
    put_bytes(&mut out, serde_json::to_string(&header).unwrap().as_bytes());
    let blocks = model.layout().blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        put_bytes(&mut out, b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for d in &b.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &model.params()[b.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Parses a checkpoint; when `expected_vocab_hash` is given it must match.
pub fn decode_checkpoint(buf: &[u8], expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 4 + 8 || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header: Header = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if let Some(expected) = expected_vocab_hash {
        if expected != header.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: header.vocab_hash,
                found: expected.to_owned(),
            });
        }
    }
    let mut model = TransformerLM::<f32>::new(&header.config)?;
    let n_blocks = r.u32()? as usize;
    if n_blocks != model.layout().blocks().len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_blocks} parameter blocks, config implies {}",
            model.layout().blocks().len()
        )));
    }
    let blocks = model.layout().blocks().to_vec();
    for b in &blocks {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if name != b.name {
            return Err(Error::Format(format!("expected block {}, found {name}", b.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != b.shape {
            return Err(Error::Format(format!("block {name} has shape {shape:?}, expected {:?}", b.shape)));
        }
        let raw = r.take(b.len() * 4)?;
        for (dst, chunk) in model.params_mut()[b.range()].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint {
        model,
        variant: header.variant,
        vocab_hash: header.vocab_hash,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &TransformerLM<f32>,
    variant: Variant,
    vocab_hash: &str,
) -> Result<()> {
    fs::write(path, encode_checkpoint(model, variant, vocab_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf, expected_vocab_hash)
}
