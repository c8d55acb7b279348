// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `TRACEDIT-CKPT v1` container.
//!
//! Layout: the 8 bytes `TRACEDIT`, a little-endian `u64` manifest length,
//! the JSON manifest, zero padding to an 8-byte boundary, then the tensor
//! payloads. Payload offsets are relative to the end of that padding and
//! every payload starts on an 8-byte boundary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaseParams, Model, ModelConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "TRACEDIT-CKPT";
const MAGIC: &[u8; 8] = b"TRACEDIT";
const VERSION: u32 = 1;

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An ordered set of named tensors with a kind tag and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<F: Scalar>(&mut self, name: &str, t: &Tensor<F>) {
        let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.size_bytes());
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        self.tensors.push(CheckpointTensor {
            name: name.to_string(),
            dtype: F::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        });
    }

    /// Decodes one tensor, converting precision if the stored dtype differs.
    pub fn tensor<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        let entry = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        decode(entry)
    }

    /// All tensors by name, converted to `F`.
    pub fn tensor_map<F: Scalar>(&self) -> Result<BTreeMap<String, Tensor<F>>> {
        self.tensors.iter().map(|e| Ok((e.name.clone(), decode(e)?))).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                byte_offset: offset,
                byte_length: t.bytes.len(),
            });
            offset = align8(offset + t.bytes.len());
        }
        let manifest = serde_json::to_vec(&Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.resize(align8(out.len()), 0);
        let base = out.len();
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
            out.resize(base + align8(out.len() - base), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a TRACEDIT-CKPT file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{} (this build reads {CHECKPOINT_FORMAT} v{VERSION})",
                manifest.format, manifest.version
            )));
        }
        let base = align8(end);
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if numel * e.dtype.size_bytes() != e.byte_length {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: shape {:?} of {} needs {} bytes, manifest says {}",
                    e.name,
                    e.shape,
                    e.dtype,
                    numel * e.dtype.size_bytes(),
                    e.byte_length
                )));
            }
            if e.byte_offset % 8 != 0 {
                return Err(Error::Checkpoint(format!("tensor `{}` is not 8-byte aligned", e.name)));
            }
            let start = base + e.byte_offset;
            let stop = start + e.byte_length;
            if stop > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated payload for tensor `{}` ({} of {} bytes present)",
                    e.name,
                    bytes.len().saturating_sub(start),
                    e.byte_length
                )));
            }
            tensors.push(CheckpointTensor {
                name: e.name,
                dtype: e.dtype,
                shape: e.shape,
                bytes: bytes[start..stop].to_vec(),
            });
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode<F: Scalar>(e: &CheckpointTensor) -> Result<Tensor<F>> {
    let size = e.dtype.size_bytes();
    let data: Vec<F> = match e.dtype {
        DType::F32 => e.bytes.chunks_exact(size).map(|c| F::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => e.bytes.chunks_exact(size).map(|c| F::lit(f64::read_le(c))).collect(),
    };
    Tensor::new(e.shape.clone(), data).map_err(|_| Error::Checkpoint(format!("tensor `{}` is malformed", e.name)))
}

/// A trained base model with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint<F> {
    pub model: Model<F>,
    pub vocab: Vocab,
    /// Free-form provenance (training report, data spec, ...).
    pub info: serde_json::Value,
}

pub fn save_model<F: Scalar>(path: &Path, model: &Model<F>, vocab: &Vocab, info: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "config": model.config,
        "vocab": vocab,
        "info": info,
    });
    let mut ck = Checkpoint::new("base-model", meta);
    for (name, t) in model.params.named() {
        ck.push(&name, t);
    }
    ck.save(path)
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<ModelCheckpoint<F>> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "base-model" {
        return Err(Error::Checkpoint(format!("{} holds a `{}`, not a base model", path.display(), ck.kind)));
    }
    let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    config.validate()?;
    let vocab: Vocab = serde_json::from_value(ck.meta["vocab"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
    vocab.validate()?;
    if vocab.len() > config.vocab_size {
        return Err(Error::Checkpoint("vocabulary larger than the model's".into()));
    }
    let params = BaseParams::from_named(&config, ck.tensor_map()?)?;
    Ok(ModelCheckpoint {
        model: Model { config, params },
        vocab,
        info: ck.meta["info"].clone(),
    })
}
