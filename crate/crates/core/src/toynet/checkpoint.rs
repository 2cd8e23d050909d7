//! Checkpoints: a JSON manifest (per-tensor name, shape, byte offset) next to
//! one raw little-endian `f64` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    blob: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
pub fn save_checkpoint(dir: &Path, stem: &str, params: &BTreeMap<String, Tensor>, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = Manifest {
        blob: format!("{stem}.bin"),
        meta,
        tensors,
    };
    let bin = dir.join(&manifest.blob);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json, e))
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(BTreeMap<String, Tensor>, serde_json::Value)> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let corrupt = |path: &Path, reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(&json, e.to_string()))?;
    let bin = dir.join(&m.blob);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut params = BTreeMap::new();
    for entry in m.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 8 * n;
        if end > bytes.len() {
            return Err(corrupt(&bin, format!("tensor {} runs past the blob", entry.name)));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| corrupt(&bin, e.to_string()))?;
        params.insert(entry.name, t);
    }
    Ok((params, m.meta))
}

impl Network {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_checkpoint(dir, stem, self.params(), serde_json::to_value(self.config())?)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Network> {
        let (params, meta) = load_checkpoint(dir, stem)?;
        let config: NetworkConfig = serde_json::from_value(meta)?;
        Network::from_parts(config, params)
    }
}
