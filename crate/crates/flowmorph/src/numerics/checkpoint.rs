//! Checkpoint container: a JSON manifest plus a little-endian f64 blob.
//!
//! A checkpoint is a directory holding `manifest.json` (free-form metadata
//! plus the name and shape of each tensor, in order) and `tensors.bin` (all
//! tensor data concatenated in manifest order, little-endian 64-bit floats).
//! Save -> load -> save reproduces both files byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NumericsError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

/// One named tensor with its shape and row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> TensorEntry {
        let entry = TensorEntry {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(entry.shape.iter().product::<usize>(), entry.data.len());
        entry
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<ManifestTensor>,
}

/// In-memory checkpoint: opaque metadata plus ordered tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn ck_io(path: &Path, source: std::io::Error) -> NumericsError {
    NumericsError::CheckpointIo {
        path: path.display().to_string(),
        source,
    }
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn save(&self, dir: &Path) -> Result<(), NumericsError> {
        fs::create_dir_all(dir).map_err(|e| ck_io(dir, e))?;
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| ck_err(&manifest_path, e.to_string()))?;
        json.push(b'\n');
        fs::write(&manifest_path, json).map_err(|e| ck_io(&manifest_path, e))?;

        let blob_path = dir.join(TENSORS_FILE);
        let mut blob = Vec::with_capacity(8 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        for tensor in &self.tensors {
            for v in &tensor.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&blob_path, blob).map_err(|e| ck_io(&blob_path, e))
    }

    pub fn load(dir: &Path) -> Result<CheckpointData, NumericsError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read(&manifest_path).map_err(|e| ck_io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| ck_err(&manifest_path, e.to_string()))?;

        let blob_path = dir.join(TENSORS_FILE);
        let blob = fs::read(&blob_path).map_err(|e| ck_io(&blob_path, e))?;
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if blob.len() != expected * 8 {
            return Err(ck_err(
                &blob_path,
                format!("blob holds {} bytes, manifest needs {}", blob.len(), expected * 8),
            ));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut offset = 0;
        for t in manifest.tensors {
            let len: usize = t.shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(
                    blob[offset..offset + 8].try_into().unwrap(),
                ));
                offset += 8;
            }
            tensors.push(TensorEntry {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        Ok(CheckpointData {
            meta: manifest.meta,
            tensors,
        })
    }
}
