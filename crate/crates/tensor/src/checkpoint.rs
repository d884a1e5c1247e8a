//! Checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset        | size | content                                        |
//! |---------------|------|------------------------------------------------|
//! | 0             | 8    | magic `SDCLCKPT`                               |
//! | 8             | 4    | format version, `u32` (currently 1)            |
//! | 12            | 8    | manifest length `L` in bytes, `u64`            |
//! | 20            | L    | manifest, UTF-8 JSON (see [`Manifest`])        |
//! | 20 + L        | ...  | data section: raw little-endian element values |
//!
//! Each manifest entry records `name`, `shape`, `trainable`, and the byte
//! `offset` of its values relative to the start of the data section. Values
//! are row-major and use the element type named by the manifest `dtype`
//! (`"f32"` or `"f64"`). Entries appear in parameter-creation order and their
//! buffers are contiguous, so the data section is exactly
//! `sum(numel) · sizeof(dtype)` bytes long.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SDCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: DType,
    /// Free-form text stored alongside the tensors (the run configuration).
    pub metadata: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode<F: Real>(store: &ParamStore<F>, metadata: &str) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
            offset: data.len() as u64,
        });
        for &v in p.tensor.data() {
            v.extend_le_bytes(&mut data);
        }
    }
    let manifest = Manifest {
        dtype: F::DTYPE,
        metadata: metadata.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<(ParamStore<F>, Manifest)> {
    let fmt = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| fmt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
    if manifest.dtype != F::DTYPE {
        return Err(fmt(&format!(
            "checkpoint holds {:?} values, expected {:?}",
            manifest.dtype,
            F::DTYPE
        )));
    }
    let data = &bytes[20 + len..];
    let size = F::DTYPE.size_of();
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = data
            .get(start..start + numel * size)
            .ok_or_else(|| fmt(&format!("truncated data for `{}`", e.name)))?;
        let values = raw.chunks_exact(size).map(F::from_le_slice).collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), values)?, e.trainable)?;
    }
    Ok((store, manifest))
}

pub fn save<F: Real>(path: &Path, store: &ParamStore<F>, metadata: &str) -> Result<()> {
    let bytes = encode(store, metadata)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<(ParamStore<F>, Manifest)> {
    decode(&fs::read(path)?)
}

/// Copies every tensor of `source` into the same-named parameter of `target`.
/// Names and shapes must match exactly.
pub fn restore_into<F: Real>(target: &mut ParamStore<F>, source: &ParamStore<F>) -> Result<()> {
    if target.len() != source.len() {
        return Err(TensorError::Format(format!(
            "checkpoint has {} tensors, model has {}",
            source.len(),
            target.len()
        )));
    }
    for (_, p) in source.iter() {
        let id = target.id_of(&p.name)?;
        let dst = target.get_mut(id);
        if dst.tensor.shape() != p.tensor.shape() {
            return Err(TensorError::Format(format!(
                "shape of `{}` differs: {:?} vs {:?}",
                p.name,
                p.tensor.shape(),
                dst.tensor.shape()
            )));
        }
        dst.tensor = p.tensor.clone();
    }
    Ok(())
}
