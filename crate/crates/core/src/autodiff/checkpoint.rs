//! On-disk parameter checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (layer shapes, activation
//! tags, optimizer metadata and free-form network metadata) and `params.bin`,
//! the parameters as little-endian f64 in manifest order (per layer: weights
//! row-major, then bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use super::params::{LayerSpec, NetworkParams};
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub layers: Vec<LayerSpec>,
    pub total_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
    /// Caller-defined metadata (network configuration, model families, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode_params(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::shape(format!(
            "parameter blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save_checkpoint(
    dir: &Path,
    params: &NetworkParams,
    optimizer: Option<OptimizerMeta>,
    metadata: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        layers: params.layers().to_vec(),
        total_count: params.total_count(),
        optimizer,
        metadata,
    };
    // Write the blob first so a manifest never points at a missing blob.
    let tmp = dir.join(format!("{BLOB}.tmp"));
    fs::write(&tmp, encode_params(params.values()))?;
    fs::rename(&tmp, dir.join(BLOB))?;
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(NetworkParams, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::config(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA})",
            manifest.schema_version
        )));
    }
    let values = decode_params(&fs::read(dir.join(BLOB))?)?;
    if values.len() != manifest.total_count {
        return Err(Error::shape(format!(
            "manifest lists {} parameters, blob holds {}",
            manifest.total_count,
            values.len()
        )));
    }
    let params = NetworkParams::from_parts(manifest.layers.clone(), values)?;
    Ok((params, manifest))
}
