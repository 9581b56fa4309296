//! Binary checkpoint layout:
//!
//! ```text
//! magic   8 bytes  "LRFCKPT\n"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes of UTF-8 JSON
//! payload f64 LE values, laid out as listed in header.tensors
//! ```
//!
//! The header holds the model config, the train state scalars, free-form
//! metadata, a tensor directory (`name`, `kind`, `shape`, `offset` in values),
//! the payload length in bytes, and the payload's SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LRFCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: usize,
    seed: u64,
    best_dev_loss: Option<f64>,
    best_step: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    state: StateHeader,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    payload_bytes: usize,
    payload_sha256: String,
}

pub struct Checkpoint {
    pub model: Seq2Seq,
    pub state: TrainState,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Seq2Seq, state: &TrainState, meta: &serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut put = |name: &str, kind: Kind, shape: &[usize], values: &[f64], tensors: &mut Vec<Entry>| {
        tensors.push(Entry {
            name: name.to_owned(),
            kind,
            shape: shape.to_vec(),
            offset,
        });
        offset += values.len();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (i, (name, t)) in model.params().iter().enumerate() {
        put(name, Kind::Param, t.shape(), t.data(), &mut tensors);
        put(name, Kind::AdamM, t.shape(), &state.adam_m[i], &mut tensors);
        put(name, Kind::AdamV, t.shape(), &state.adam_v[i], &mut tensors);
    }
    let header = Header {
        model: model.config().clone(),
        state: StateHeader {
            step: state.step,
            seed: state.seed,
            best_dev_loss: state.best_dev_loss,
            best_step: state.best_step,
        },
        meta: meta.clone(),
        tensors,
        payload_bytes: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() != header.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }

    let mut model = Seq2Seq::new(header.model).map_err(|e| bad(format!("model config: {e}")))?;
    let mut state = TrainState::new(&model, header.state.seed);
    state.step = header.state.step;
    state.best_dev_loss = header.state.best_dev_loss;
    state.best_step = header.state.best_step;

    let mut seen = vec![[false; 3]; model.params().len()];
    for e in &header.tensors {
        let id = model
            .params()
            .id(&e.name)
            .ok_or_else(|| bad(format!("unknown tensor `{}`", e.name)))?;
        let expected = model.params().get(id).shape().to_vec();
        if e.shape != expected {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                e.name, e.shape, expected
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let raw = payload
            .get(start..start + n * 8)
            .ok_or_else(|| bad(format!("tensor `{}` out of range", e.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let slot = match e.kind {
            Kind::Param => 0,
            Kind::AdamM => 1,
            Kind::AdamV => 2,
        };
        seen[id.index()][slot] = true;
        match e.kind {
            Kind::Param => {
                let t = Tensor::new(e.shape.clone(), values)?;
                model.params_mut().load_values([(e.name.as_str(), &t)])?;
            }
            Kind::AdamM => state.adam_m[id.index()] = values,
            Kind::AdamV => state.adam_v[id.index()] = values,
        }
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
        let name = model
            .params()
            .iter()
            .nth(i)
            .map(|(n, _)| n.to_owned())
            .unwrap_or_default();
        return Err(bad(format!("missing tensor `{name}`")));
    }
    Ok(Checkpoint {
        model,
        state,
        meta: header.meta,
    })
}
