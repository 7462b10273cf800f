//! Checkpoints: a JSON manifest naming tensors plus a little-endian f64
//! blob, with a whole-blob checksum. Round-trips are bit-exact and tensor
//! names (not manifest order) are authoritative.

use super::{ServerOptimizer, ServerState};
use crate::dp::MechanismSpec;
use crate::model::AppSelectionParams;
use crate::nn::{AdamWState, ModelParams, SgdState, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

const FORMAT_TAG: &str = "pflsim-ckpt-v1";
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";
const MOMENT1_PREFIX: &str = "m1/";
const MOMENT2_PREFIX: &str = "m2/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("blob checksum mismatch (expected {expected}, got {got})")]
    ChecksumMismatch { expected: String, got: String },
    #[error("tensor {name:?}: {problem}")]
    BadTensor { name: String, problem: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: u64,
    /// Element count.
    len: u64,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerSection {
    kind: String,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon_stability: f64,
    weight_decay: f64,
    step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct ServerSection {
    iteration: u64,
    sigma: f64,
    q: f64,
    accounted_iterations: u64,
    master_seed: u64,
    optimizer: OptimizerSection,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    server: Option<ServerSection>,
}

fn blob_digest(blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(blob);
    crate::nn::hex_digest(&h.finalize())
}

struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
    offset: u64,
}

impl BlobWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            entries: Vec::new(),
            offset: 0,
        }
    }

    fn push(&mut self, name: &str, tensor: &Tensor, frozen: bool) {
        self.bytes.extend_from_slice(&tensor.to_le_bytes());
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: self.offset,
            len: tensor.len() as u64,
            frozen,
        });
        self.offset += tensor.len() as u64;
    }
}

fn write_checkpoint(dir: &Path, writer: BlobWriter, server: Option<ServerSection>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        blob_sha256: blob_digest(&writer.bytes),
        tensors: writer.entries,
        server,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    std::fs::write(dir.join(BLOB_FILE), writer.bytes)?;
    Ok(())
}

/// Save model parameters only.
pub fn save_model_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    let mut w = BlobWriter::new();
    for e in params.entries() {
        w.push(&e.name, &e.tensor, e.frozen);
    }
    write_checkpoint(dir, w, None)
}

/// Save the full server state: model, optimizer moments, counters.
pub fn save_server_state(state: &ServerState, dir: &Path) -> Result<()> {
    let params = state.model.params();
    let mut w = BlobWriter::new();
    for e in params.entries() {
        w.push(&e.name, &e.tensor, e.frozen);
    }
    let optimizer = match &state.optimizer {
        ServerOptimizer::AdamW(st) => {
            for (e, m) in params.entries().iter().zip(&st.first_moment) {
                w.push(&format!("{MOMENT1_PREFIX}{}", e.name), m, false);
            }
            for (e, v) in params.entries().iter().zip(&st.second_moment) {
                w.push(&format!("{MOMENT2_PREFIX}{}", e.name), v, false);
            }
            OptimizerSection {
                kind: "adamw".into(),
                learning_rate: st.learning_rate,
                beta1: st.beta1,
                beta2: st.beta2,
                epsilon_stability: st.epsilon_stability,
                weight_decay: st.weight_decay,
                step_count: st.step_count,
            }
        }
        ServerOptimizer::Sgd(st) => OptimizerSection {
            kind: "sgd".into(),
            learning_rate: st.learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon_stability: 0.0,
            weight_decay: 0.0,
            step_count: 0,
        },
    };
    let server = ServerSection {
        iteration: state.iteration,
        sigma: state.mechanism.sigma,
        q: state.mechanism.q,
        accounted_iterations: state.mechanism.iterations,
        master_seed: state.master_seed,
        optimizer,
    };
    write_checkpoint(dir, w, Some(server))
}

struct LoadedBlob {
    manifest: Manifest,
    values: Vec<f64>,
}

fn read_checkpoint(dir: &Path) -> Result<LoadedBlob> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(CheckpointError::Malformed(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    let got = blob_digest(&blob);
    if got != manifest.blob_sha256 {
        return Err(CheckpointError::ChecksumMismatch {
            expected: manifest.blob_sha256,
            got,
        });
    }
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Malformed("blob is not a whole number of f64s".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(LoadedBlob { manifest, values })
}

fn extract_tensor(entry: &TensorEntry, values: &[f64]) -> Result<Tensor> {
    let start = entry.offset as usize;
    let end = start + entry.len as usize;
    if end > values.len() {
        return Err(CheckpointError::BadTensor {
            name: entry.name.clone(),
            problem: format!("range {start}..{end} exceeds blob of {}", values.len()),
        });
    }
    let expected: usize = entry.shape.iter().product();
    if expected != entry.len as usize {
        return Err(CheckpointError::BadTensor {
            name: entry.name.clone(),
            problem: format!("shape {:?} does not hold {} elements", entry.shape, entry.len),
        });
    }
    Tensor::new(entry.shape.clone(), values[start..end].to_vec()).map_err(|e| {
        CheckpointError::BadTensor {
            name: entry.name.clone(),
            problem: e.to_string(),
        }
    })
}

fn params_from(blob: &LoadedBlob) -> Result<ModelParams> {
    let mut params = ModelParams::new();
    for entry in &blob.manifest.tensors {
        if entry.name.starts_with(MOMENT1_PREFIX) || entry.name.starts_with(MOMENT2_PREFIX) {
            continue;
        }
        let tensor = extract_tensor(entry, &blob.values)?;
        params
            .insert(&entry.name, tensor)
            .map_err(|e| CheckpointError::BadTensor {
                name: entry.name.clone(),
                problem: e.to_string(),
            })?;
        if entry.frozen {
            params.set_frozen_where(|n| n == entry.name, true);
        }
    }
    if params.is_empty() {
        return Err(CheckpointError::Malformed("checkpoint holds no tensors".into()));
    }
    Ok(params)
}

/// Load model parameters; manifest order is irrelevant, names rule.
pub fn load_model_checkpoint(dir: &Path) -> Result<ModelParams> {
    let blob = read_checkpoint(dir)?;
    params_from(&blob)
}

/// Load a full server state previously written by [`save_server_state`].
pub fn load_server_state(dir: &Path) -> Result<ServerState> {
    let blob = read_checkpoint(dir)?;
    let server = blob
        .manifest
        .server
        .as_ref()
        .ok_or_else(|| CheckpointError::Malformed("not a server-state checkpoint".into()))?;
    let params = params_from(&blob)?;
    let model = AppSelectionParams::from_params(params)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let find = |name: &str| -> Result<Tensor> {
        let entry = blob
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::BadTensor {
                name: name.to_string(),
                problem: "missing".into(),
            })?;
        extract_tensor(entry, &blob.values)
    };
    let optimizer = match server.optimizer.kind.as_str() {
        "adamw" => {
            let mut st = AdamWState::new(
                server.optimizer.learning_rate,
                server.optimizer.beta1,
                server.optimizer.beta2,
                server.optimizer.epsilon_stability,
                server.optimizer.weight_decay,
                model.params(),
            )
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            st.step_count = server.optimizer.step_count;
            let names: Vec<String> =
                model.params().entries().iter().map(|e| e.name.clone()).collect();
            for (i, name) in names.iter().enumerate() {
                st.first_moment[i] = find(&format!("{MOMENT1_PREFIX}{name}"))?;
                st.second_moment[i] = find(&format!("{MOMENT2_PREFIX}{name}"))?;
            }
            ServerOptimizer::AdamW(st)
        }
        "sgd" => ServerOptimizer::Sgd(
            SgdState::new(server.optimizer.learning_rate)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
        ),
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown optimizer kind {other:?}"
            )))
        }
    };
    Ok(ServerState {
        model,
        optimizer,
        iteration: server.iteration,
        mechanism: MechanismSpec {
            sigma: server.sigma,
            q: server.q,
            iterations: server.accounted_iterations,
        },
        master_seed: server.master_seed,
    })
}
