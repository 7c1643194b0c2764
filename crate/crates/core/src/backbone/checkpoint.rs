//! Checkpoint container.
//!
//! Layout: the magic string `UNIREFCKPT1`, a little-endian u64 header
//! length, a JSON header (array names and shapes, element type, config,
//! training step, content hash), then raw little-endian f32 payloads in
//! header order. The loader recomputes the hash and rejects mismatches.

use super::{BackboneConfig, BackboneError, ModelParams};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 11] = b"UNIREFCKPT1";
const DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic: not a checkpoint container")]
    BadMagic,
    #[error("unsupported element type {0}")]
    BadDtype(String),
    #[error("content hash mismatch: header {header}, payload {computed}")]
    HashMismatch { header: String, computed: String },
    #[error("payload truncated while reading array {0}")]
    Truncated(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayMeta>,
    dtype: String,
    config: BackboneConfig,
    step: u64,
    content_hash: String,
}

/// Write parameters (and the training step that produced them) to `path`.
pub fn save(params: &ModelParams, step: u64, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        arrays: params
            .arrays()
            .map(|(name, arr)| ArrayMeta {
                name: name.clone(),
                shape: [arr.nrows(), arr.ncols()],
            })
            .collect(),
        dtype: DTYPE.to_string(),
        config: params.config.clone(),
        step,
        content_hash: params.content_hash(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, arr) in params.arrays() {
        for v in arr.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint, validating the magic, element type, and content hash.
/// Returns the parameters and the stored training step.
pub fn load(path: &Path) -> Result<(ModelParams, u64), CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 11];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.dtype != DTYPE {
        return Err(CheckpointError::BadDtype(header.dtype));
    }
    header.config.validate()?;

    let mut arrays = BTreeMap::new();
    for meta in &header.arrays {
        let count = meta.shape[0] * meta.shape[1];
        let mut buf = vec![0u8; count * 4];
        reader
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Truncated(meta.name.clone()))?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = Array2::from_shape_vec((meta.shape[0], meta.shape[1]), data)
            .expect("shape matches data length");
        arrays.insert(meta.name.clone(), arr);
    }
    let params = ModelParams::from_arrays(header.config, arrays);
    let computed = params.content_hash();
    if computed != header.content_hash {
        return Err(CheckpointError::HashMismatch {
            header: header.content_hash,
            computed,
        });
    }
    Ok((params, header.step))
}
