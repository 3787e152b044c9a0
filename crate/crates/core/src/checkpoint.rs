//! Checkpoint format: a directory holding `manifest.json` (tensor names,
//! shapes, dtype, blob files, plus free-form metadata) and one raw
//! little-endian f32 blob per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "reenact-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

fn blob_name(name: &str) -> String {
    format!("{}.bin", name.replace(['/', '\\'], "_"))
}

pub fn write_tensors(dir: &Path, tensors: &[(String, &ArrayD<f32>)], meta: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        let file = blob_name(name);
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.as_standard_layout().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&file), bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            file,
        });
    }
    let manifest = Manifest { format: FORMAT.into(), tensors: entries, meta };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format '{}'", manifest.format)));
    }
    Ok(manifest)
}

pub fn read_tensors(dir: &Path) -> Result<(BTreeMap<String, ArrayD<f32>>, serde_json::Value)> {
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{}: blob has {} bytes, expected {expected}",
                entry.name,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(
            entry.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?,
        );
    }
    Ok((out, manifest.meta))
}

/// Copies checkpoint tensors into an existing set of named tensors, erroring
/// on missing names or shape drift.
pub fn restore_into(tensors: &mut [(String, &mut ArrayD<f32>)], loaded: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
    for (name, slot) in tensors {
        let src = loaded
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if src.shape() != slot.shape() {
            return Err(Error::shape(format!("checkpoint tensor {name}"), slot.shape(), src.shape()));
        }
        slot.assign(src);
    }
    Ok(())
}
