//! Model checkpoint files.
//!
//! Layout: the 8 bytes `MTFNET01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every parameter as a little-endian IEEE-754
//! `f32`. Parameters are stored in canonical order: `conv0`, then each
//! residual block (`conv1`, `conv2`, optional `projection`), then the dense
//! layers, each tensor as weight then bias. Convolution weights are
//! `[out][in][ky][kx]`, dense weights `[out][in]`. The header lists every
//! tensor with its offset and shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::ModelParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MTFNET01";

/// Provenance of a trained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// `pattern` or `natural`.
    pub source: String,
    pub steps: usize,
    pub multi_steps: usize,
    pub seed: u64,
    pub validation_loss: Option<f64>,
    /// Assumed MTF of the sharp source at 10/20/30/40 cy/mm; the chart
    /// compensation factors for natural-scene models.
    pub residual_mtf: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetConfig,
    pub meta: TrainingMeta,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: params.config().clone(),
        meta: meta.clone(),
        param_count: params.values().len(),
        tensors: params
            .architecture()
            .param_tensors()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                offset: t.offset,
                shape: t.shape,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::param("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelParams, TrainingMeta)> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not an MTFNET01 checkpoint"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let blob = &bytes[12 + len..];
    if blob.len() != 4 * header.param_count {
        return Err(bad(&format!(
            "expected {} parameter bytes, found {}",
            4 * header.param_count,
            blob.len()
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameter".into()));
    }
    let params = ModelParams::from_values(header.config, values)?;
    Ok((params, header.meta))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &TrainingMeta) -> Result<()> {
    fs::write(path, encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainingMeta)> {
    decode_checkpoint(&fs::read(path)?, path)
}
