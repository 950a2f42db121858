//! Single-file checkpoint container.
//!
//! Layout: u32 manifest length, JSON manifest (version, model config,
//! tensor directory with name/shape/offset/byte length), raw 32-bit
//! IEEE-754 little-endian tensor payloads, trailing CRC-32 over everything
//! before it. Parameters are f32-representable in memory, so save/load
//! round-trips are bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::content::Codebook;
use crate::error::VcError;
use crate::model::{ModelConfig, VcModel};
use crate::Result;

const VERSION: u32 = 1;
const CODEBOOK_TENSOR: &str = "codebook.centroids";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    byte_len: usize,
}

fn tensor_bytes(a: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for &v in a.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn tensor_from_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<Array2<f64>> {
    if bytes.len() != rows * cols * 4 {
        return Err(VcError::Data(format!(
            "tensor payload {} bytes, expected {}",
            bytes.len(),
            rows * cols * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| VcError::Data(e.to_string()))
}

pub fn save_checkpoint(model: &VcModel, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, a: &Array2<f64>, payload: &mut Vec<u8>| {
        let bytes = tensor_bytes(a);
        tensors.push(TensorEntry {
            name,
            rows: a.nrows(),
            cols: a.ncols(),
            offset: payload.len(),
            byte_len: bytes.len(),
        });
        payload.extend_from_slice(&bytes);
    };
    for i in 0..model.store.len() {
        let p = crate::nn::Param(i);
        push(model.store.name(p).to_string(), model.store.get(p), &mut payload);
    }
    push(CODEBOOK_TENSOR.to_string(), &model.codebook.centroids, &mut payload);

    let manifest = Manifest {
        version: VERSION,
        config: model.cfg.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = Vec::with_capacity(4 + manifest_bytes.len() + payload.len() + 4);
    file.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    file.extend_from_slice(&payload);
    let crc = crc32fast::hash(&file);
    file.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VcModel> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    if bytes.len() < 8 {
        return Err(VcError::Truncated(display));
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let body = &bytes[..bytes.len() - 4];
    let computed = crc32fast::hash(body);
    if computed != stored_crc {
        return Err(VcError::ChecksumMismatch {
            stored: stored_crc,
            computed,
        });
    }

    let manifest_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    if body.len() < 4 + manifest_len {
        return Err(VcError::Truncated(display));
    }
    let manifest: Manifest = serde_json::from_slice(&body[4..4 + manifest_len])?;
    if manifest.version != VERSION {
        return Err(VcError::VersionMismatch {
            kind: "checkpoint",
            found: manifest.version,
            expected: VERSION,
        });
    }
    let payload = &body[4 + manifest_len..];

    let find = |name: &str| -> Result<&TensorEntry> {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| VcError::Data(format!("missing tensor `{name}`")))
    };
    let slice_of = |t: &TensorEntry| -> Result<&[u8]> {
        payload
            .get(t.offset..t.offset + t.byte_len)
            .ok_or_else(|| VcError::Truncated(display.clone()))
    };

    let cb_entry = find(CODEBOOK_TENSOR)?;
    let centroids = tensor_from_bytes(slice_of(cb_entry)?, cb_entry.rows, cb_entry.cols)?;
    let codebook = Codebook::new(centroids);

    let mut model = VcModel::new(manifest.config.clone(), codebook, 0)?;
    for i in 0..model.store.len() {
        let name = model.store.name(crate::nn::Param(i)).to_string();
        let entry = find(&name)?;
        let tensor = tensor_from_bytes(slice_of(entry)?, entry.rows, entry.cols)?;
        let expected = model.store.get(crate::nn::Param(i)).dim();
        if tensor.dim() != expected {
            return Err(VcError::Data(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                tensor.dim(),
                expected
            )));
        }
        model.store.set_by_name(&name, tensor);
    }
    Ok(model)
}
