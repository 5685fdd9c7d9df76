//! Checkpoint archive: `<path>` holds the raw little-endian parameter bytes
//! back to back, `<path>.json` describes them.
//!
//! The sidecar records each tensor's name, shape, dtype, byte offset and
//! length, together with the embedded configuration, its hash, the training
//! stage and the iteration counter. Tensors are written in name order.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: String,
    pub iteration: usize,
    pub config_toml: String,
    pub config_hash: String,
    pub tokenizer_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(validation(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(validation(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

/// Checkpoint contents held in memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore,
        stage: &str,
        iteration: usize,
        config_toml: String,
        config_hash: String,
        tokenizer_hash: String,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, var) in store.iter() {
            let t = var.as_tensor().copy()?;
            let nbytes = t.elem_count() * t.dtype().size_in_bytes();
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.dims().to_vec(),
                dtype: dtype_name(t.dtype())?.to_string(),
                offset,
                nbytes,
            });
            offset += nbytes;
            tensors.push((name.to_string(), t));
        }
        Ok(Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                stage: stage.to_string(),
                iteration,
                config_toml,
                config_hash,
                tokenizer_hash,
                tensors: entries,
            },
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut blob = Vec::new();
        for (_, t) in &self.tensors {
            blob.extend(tensor_bytes(t)?);
        }
        fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)? + "\n";
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(validation(format!(
                "checkpoint format {} is not supported",
                meta.format_version
            )));
        }
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let end = e.offset + e.nbytes;
            if end > blob.len() {
                return Err(validation(format!("checkpoint truncated at tensor {}", e.name)));
            }
            let bytes = &blob[e.offset..end];
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" if e.nbytes == 4 * n => {
                    let v: Vec<f32> = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "f64" if e.nbytes == 8 * n => {
                    let v: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                _ => {
                    return Err(validation(format!(
                        "tensor {} has inconsistent dtype {} or size",
                        e.name, e.dtype
                    )))
                }
            };
            tensors.push((e.name.clone(), t));
        }
        Ok(Self { meta, tensors })
    }

    /// Copies every tensor whose name starts with one of `prefixes` into the
    /// store. Names and shapes must match exactly.
    pub fn restore_into(&self, store: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut n = 0;
        for (name, t) in &self.tensors {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            if store.get(name).is_none() {
                return Err(validation(format!("checkpoint tensor {name} has no model parameter")));
            }
            store.assign(name, t)?;
            n += 1;
        }
        for name in store.names() {
            if prefixes.iter().any(|p| name.starts_with(p))
                && !self.tensors.iter().any(|(k, _)| k == name)
            {
                return Err(validation(format!("checkpoint lacks parameter {name}")));
            }
        }
        Ok(n)
    }
}
