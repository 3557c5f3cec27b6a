//! Named tensor bundles: a JSON manifest plus a raw little-endian `f32` payload.
//!
//! The payload convention is shared with feature stores and score matrices.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

pub fn encode_f32le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32le(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(
            path,
            format!("payload length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Resolves a payload name relative to the directory holding its manifest.
pub fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

/// Default payload file name for a manifest (`model.json` -> `model.bin`).
pub fn default_payload_name(manifest: &Path) -> String {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "payload".into());
    format!("{stem}.bin")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BundleManifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload: String,
    pub dtype: String,
}

/// An ordered collection of named `f32` tensors with free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorBundle {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("tensor {name} not in bundle {}", self.kind)))
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let payload = default_payload_name(manifest_path);
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            bytes.extend(encode_f32le(t.data()));
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
        }
        let manifest = BundleManifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
            payload: payload.clone(),
            dtype: DTYPE_F32LE.into(),
        };
        write_bytes(&sibling(manifest_path, &payload), &bytes)?;
        write_json(manifest_path, &manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: BundleManifest = read_json(manifest_path)?;
        if manifest.dtype != DTYPE_F32LE {
            return Err(Error::format(
                manifest_path,
                format!("unsupported dtype {}", manifest.dtype),
            ));
        }
        let payload_path = sibling(manifest_path, &manifest.payload);
        let values = decode_f32le(&read_bytes(&payload_path)?, &payload_path)?;
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if expected != values.len() {
            return Err(Error::format(
                &payload_path,
                format!("manifest declares {expected} values, payload holds {}", values.len()),
            ));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let t = Tensor::new(e.shape, values[offset..offset + n].to_vec())?;
            offset += n;
            tensors.push((e.name, t));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        let mut b = TensorBundle::new("test", serde_json::json!({"x": 1}));
        b.push("a", Tensor::vector(vec![0.1, -3.5e-20, f32::MIN_POSITIVE]));
        b.push("m", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        b.save(&path).unwrap();
        let back = TensorBundle::load(&path).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        let mut b = TensorBundle::new("test", serde_json::Value::Null);
        b.push("a", Tensor::vector(vec![1.0, 2.0]));
        b.save(&path).unwrap();
        fs::write(dir.path().join("b.bin"), encode_f32le(&[1.0])).unwrap();
        assert!(matches!(TensorBundle::load(&path), Err(Error::Format { .. })));
    }
}
