//! Model files: one JSON header line, then the tensors as little-endian
//! `f64`s in header order. The header carries the payload length and its
//! SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, ModelParams, NnError, ParamSet, TENSOR_NAMES};

const FORMAT: &str = "branchforge-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    arch: ArchConfig,
    activation: String,
    init_seed: u64,
    tensors: Vec<TensorHeader>,
    payload_bytes: usize,
    sha256: String,
}

pub fn model_to_bytes(model: &ModelParams) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.params.num_params() * 8);
    for t in model.params.tensors() {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        arch: model.arch,
        activation: "relu".into(),
        init_seed: model.init_seed,
        tensors: model
            .params
            .named()
            .map(|(name, t)| TensorHeader {
                name: name.into(),
                shape: t.shape.clone(),
            })
            .collect(),
        payload_bytes: payload.len(),
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialization cannot fail");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams, NnError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::ChecksumMismatch("file ends inside the header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| NnError::Format(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(NnError::Format(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let payload = &bytes[split + 1..];
    if payload.len() != header.payload_bytes {
        return Err(NnError::ChecksumMismatch(format!(
            "payload has {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(NnError::ChecksumMismatch("payload digest differs".into()));
    }
    header.arch.validate()?;

    let mut params = ParamSet::zeros(&header.arch);
    let expected: usize = params.num_params() * 8;
    let declared: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if declared != header.payload_bytes || expected != header.payload_bytes {
        return Err(NnError::ChecksumMismatch(format!(
            "tensor shapes describe {declared} bytes, arch needs {expected}, payload has {}",
            header.payload_bytes
        )));
    }
    if header.tensors.len() != TENSOR_NAMES.len() {
        return Err(NnError::Format("wrong number of tensors".into()));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for ((t, th), name) in params.tensors_mut().into_iter().zip(&header.tensors).zip(TENSOR_NAMES) {
        if th.name != name || th.shape != t.shape {
            return Err(NnError::ArchMismatch(format!(
                "tensor {} {:?} where {} {:?} was expected",
                th.name, th.shape, name, t.shape
            )));
        }
        t.data.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    if !params.all_finite() {
        return Err(NnError::Format("non-finite weight".into()));
    }
    Ok(ModelParams {
        arch: header.arch,
        init_seed: header.init_seed,
        params,
    })
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams, NnError> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Loads a model and checks it has the expected architecture.
pub fn load_model_expecting(path: &Path, arch: &ArchConfig) -> Result<ModelParams, NnError> {
    let model = load_model(path)?;
    if model.arch != *arch {
        return Err(NnError::ArchMismatch(format!(
            "file has {:?}, expected {:?}",
            model.arch, arch
        )));
    }
    Ok(model)
}
