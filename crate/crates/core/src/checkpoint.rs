//! Versioned checkpoint files: JSON holding the config, every parameter
//! array (trainable and frozen) with name and shape, and a SHA-256 checksum
//! over the payload. Floats are written in shortest round-trip decimal, so
//! `load(save(model))` reproduces the parameters bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::GaussianProjection;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    config: ModelConfig,
    gauss_seeds: Vec<u64>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    checksum: String,
    payload: Payload,
}

fn sha256_hex(s: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    for (name, t) in model.params.trainable() {
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }
    for (name, t) in model.params.frozen() {
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }
    let payload = Payload {
        config: model.config.clone(),
        gauss_seeds: model.params.scales.iter().map(|s| s.gauss.seed).collect(),
        params,
    };
    let payload_json = serde_json::to_string(&payload)
        .map_err(|e| Error::Io(format!("checkpoint serialization failed: {e}")))?;
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        checksum: sha256_hex(&payload_json),
        payload,
    };
    let body = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Io(format!("checkpoint serialization failed: {e}")))?;
    fs::write(path, body).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&body).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        row: 0,
        msg: e.to_string(),
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let payload_json = serde_json::to_string(&file.payload)
        .map_err(|e| Error::Io(format!("checkpoint re-serialization failed: {e}")))?;
    let actual = sha256_hex(&payload_json);
    if actual != file.checksum {
        return Err(Error::Input(format!(
            "checkpoint checksum mismatch in {}: stored {}, computed {actual}",
            path.display(),
            file.checksum
        )));
    }

    let config = file.payload.config;
    // start from a seeded skeleton, then overwrite every array from the file
    let mut params = ModelParams::init(&config)?;
    let mut entries: std::collections::BTreeMap<String, ParamEntry> = file
        .payload
        .params
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();

    let mut restore = |name: &str, t: &mut Tensor| -> Result<()> {
        let entry = entries.remove(name).ok_or_else(|| {
            Error::Input(format!(
                "checkpoint {} is missing parameter {name}",
                path.display()
            ))
        })?;
        if entry.shape != t.shape() {
            return Err(Error::Dim(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                entry.shape,
                t.shape()
            )));
        }
        let keep_grad = t.requires_grad();
        let mut replaced = Tensor::from_vec(entry.shape, entry.data)?;
        if keep_grad {
            replaced = replaced.with_grad();
        }
        *t = replaced;
        Ok(())
    };

    for (name, t) in params.trainable_mut() {
        restore(&name, t)?;
    }
    for (si, branch) in params.scales.iter_mut().enumerate() {
        let seed = *file.payload.gauss_seeds.get(si).ok_or_else(|| {
            Error::Input(format!("checkpoint missing gaussian seed for scale {si}"))
        })?;
        let mut weights = branch.gauss.weights.clone();
        let mut offsets = branch.gauss.offsets.clone();
        restore(&format!("scale{si}.gauss.weights"), &mut weights)?;
        restore(&format!("scale{si}.gauss.offsets"), &mut offsets)?;
        branch.gauss = GaussianProjection {
            weights,
            offsets,
            sigma: config.gauss_sigma,
            seed,
        };
    }
    if !entries.is_empty() {
        let extra: Vec<&String> = entries.keys().collect();
        return Err(Error::Input(format!(
            "checkpoint has unexpected parameters: {extra:?}"
        )));
    }
    Ok(Model { config, params })
}
