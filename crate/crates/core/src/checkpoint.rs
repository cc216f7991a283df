//! Checkpoint container.
//!
//! ```text
//! magic     8 bytes  "CSPCCKPT"
//! version   u32 LE
//! hdr_len   u64 LE
//! header    hdr_len bytes of UTF-8 JSON (CheckpointHeader)
//! payload   f32 LE values, tensors back to back in header order
//! ```
//!
//! Tensor names are dotted module paths (`sdm.emotion_encoder.conv0.weight`).
//! Kinds are `param`, `buffer`, `adam_m` and `adam_v`. Everything is kept in
//! sorted order, so saving the same state twice gives identical bytes.

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::pipeline::{Ablation, ModelConfig, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CSPCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub corpus_fingerprint: String,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: configuration plus rebuilt training state.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus_fingerprint: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.state.step()
    }
}

fn tensor_values(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_vec1::<f32>()?)
}

pub fn encode_checkpoint(
    state: &TrainState,
    train: &TrainConfig,
    corpus_fingerprint: &str,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: &str, kind: TensorKind, t: &Tensor| -> Result<()> {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.dims().to_vec(),
            offset: payload.len(),
        });
        payload.extend(tensor_values(t)?);
        Ok(())
    };
    for (name, var) in state.store.params() {
        push(name, TensorKind::Param, var.as_tensor())?;
    }
    for (name, var) in state.store.buffers() {
        push(name, TensorKind::Buffer, var.as_tensor())?;
    }
    for (name, t) in &state.adam.first_moment {
        push(name, TensorKind::AdamM, t)?;
    }
    for (name, t) in &state.adam.second_moment {
        push(name, TensorKind::AdamV, t)?;
    }
    let header = CheckpointHeader {
        model: state.model.config.clone(),
        train: train.clone(),
        step: state.step(),
        corpus_fingerprint: corpus_fingerprint.to_string(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    train: &TrainConfig,
    corpus_fingerprint: &str,
) -> Result<()> {
    let bytes = encode_checkpoint(state, train, corpus_fingerprint)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(incompatible("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(incompatible(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hdr_len {
        return Err(incompatible("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hdr_len])
        .map_err(|e| incompatible(format!("bad header: {e}")))?;
    Ok((header, &body[hdr_len..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = decode_header(bytes)?;
    if payload.len() % 4 != 0 {
        return Err(incompatible("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut store = ParamStore::new(header.train.seed);
    let mut adam = AdamState::new();
    adam.step = header.step;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| incompatible(format!("tensor {} out of bounds", entry.name)))?;
        let t = Tensor::from_slice(data, entry.shape.as_slice(), &Device::Cpu)?;
        match entry.kind {
            TensorKind::Param => store.insert(entry.name.clone(), t, true)?,
            TensorKind::Buffer => store.insert(entry.name.clone(), t, false)?,
            TensorKind::AdamM => {
                adam.first_moment.insert(entry.name.clone(), t);
            }
            TensorKind::AdamV => {
                adam.second_moment.insert(entry.name.clone(), t);
            }
        }
    }
    let state = TrainState::from_parts(store, &header.model, adam)?;
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        corpus_fingerprint: header.corpus_fingerprint,
        state,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads and checks that the checkpoint was trained with `ablation`.
pub fn load_checkpoint_for(path: &Path, ablation: Ablation) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.train.ablation != ablation {
        return Err(incompatible(format!(
            "trained as {}, requested {}",
            ckpt.train.ablation, ablation
        )));
    }
    Ok(ckpt)
}
