//! On-disk parameter checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json`, an ordered array of
//! `{name, shape, dtype}` entries, and one `<name>.bin` file per parameter
//! with its values as little-endian IEEE-754 `f64` in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn file_name(name: &str) -> Result<String> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(TensorError::Checkpoint(format!(
            "parameter name `{name}` cannot be used as a file name"
        )));
    }
    Ok(format!("{name}.bin"))
}

pub fn save(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let mut bytes = Vec::with_capacity(p.value.numel() * 8);
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(file_name(&p.name)?), bytes)?;
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
        });
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

/// Reads every tensor listed in the manifest, in manifest order.
pub fn read(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        if entry.dtype != "f64" {
            return Err(TensorError::Checkpoint(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let bytes = fs::read(dir.join(file_name(&entry.name)?))?;
        let expected = numel(&entry.shape) * 8;
        if bytes.len() != expected {
            return Err(TensorError::Checkpoint(format!(
                "{}: expected {expected} bytes, found {}",
                entry.name,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

/// Overwrites the values of `store` from a checkpoint with exactly the same
/// parameter names and shapes.
pub fn load_into(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let tensors = read(dir)?;
    if tensors.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store.id(&name)?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "checkpoint load",
                lhs: p.value.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        p.value = t;
    }
    Ok(())
}
