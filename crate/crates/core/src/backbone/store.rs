//! Feature stores: pooled embeddings (and optional token sequences) keyed by id.
//!
//! On disk a store is a JSON manifest plus a payload of row-major little-endian
//! `f32`: all pooled rows first (in id order), then each id's token block in the
//! same order. The payload holds exactly `4 * count * dim * (1 + token_len)` bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::bundle::{
    decode_f32le, default_payload_name, encode_f32le, read_bytes, read_json, sibling, write_bytes,
    write_json, DTYPE_F32LE,
};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dim: usize,
    pub token_len: usize,
    pub modality: Modality,
    pub ids: Vec<String>,
    pub payload: String,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    modality: Modality,
    ids: Vec<String>,
    pooled: Vec<Tensor<f32>>,
    tokens: Option<Vec<Tensor<f32>>>,
    position: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize, modality: Modality) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            modality,
            ids: Vec::new(),
            pooled: Vec::new(),
            tokens: None,
            position: HashMap::new(),
        })
    }

    /// Adds an entry. Either every entry carries tokens or none does.
    pub fn insert(&mut self, id: &str, pooled: Tensor<f32>, tokens: Option<Tensor<f32>>) -> Result<()> {
        if self.position.contains_key(id) {
            return Err(Error::Data(format!("duplicate feature id {id}")));
        }
        if pooled.len() != self.dim || pooled.rank() != 1 {
            return Err(Error::Dimension(format!(
                "pooled vector for {id} has shape {:?}, store dim is {}",
                pooled.shape(),
                self.dim
            )));
        }
        if let Some(t) = &tokens {
            if t.rank() != 2 || t.cols() != self.dim {
                return Err(Error::Dimension(format!(
                    "token block for {id} has shape {:?}, trailing dim must be {}",
                    t.shape(),
                    self.dim
                )));
            }
        }
        match (&mut self.tokens, tokens) {
            (Some(list), Some(t)) => list.push(t),
            (None, None) => {}
            (None, Some(t)) if self.ids.is_empty() => self.tokens = Some(vec![t]),
            _ => {
                return Err(Error::Data(format!(
                    "entry {id} disagrees with the store about token sequences"
                )))
            }
        }
        self.position.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.pooled.push(pooled);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_tokens(&self) -> bool {
        self.tokens.is_some()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position.contains_key(id)
    }

    fn pos(&self, id: &str) -> Result<usize> {
        self.position
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("{id} not in {:?} feature store", self.modality)))
    }

    pub fn pooled(&self, id: &str) -> Result<&Tensor<f32>> {
        Ok(&self.pooled[self.pos(id)?])
    }

    pub fn tokens(&self, id: &str) -> Result<Option<&Tensor<f32>>> {
        let p = self.pos(id)?;
        Ok(self.tokens.as_ref().map(|t| &t[p]))
    }

    fn uniform_token_len(&self) -> Result<usize> {
        let Some(list) = &self.tokens else { return Ok(0) };
        let l = list.first().map(|t| t.rows()).unwrap_or(0);
        if list.iter().any(|t| t.rows() != l) {
            return Err(Error::Data(
                "token sequences of different lengths cannot be written to one store file".into(),
            ));
        }
        Ok(l)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let token_len = self.uniform_token_len()?;
        let payload = default_payload_name(manifest_path);
        let mut bytes = Vec::with_capacity(4 * self.len() * self.dim * (1 + token_len));
        for p in &self.pooled {
            bytes.extend(encode_f32le(p.data()));
        }
        if let Some(list) = &self.tokens {
            for t in list {
                bytes.extend(encode_f32le(t.data()));
            }
        }
        let manifest = StoreManifest {
            dim: self.dim,
            token_len,
            modality: self.modality,
            ids: self.ids.clone(),
            payload: payload.clone(),
            dtype: DTYPE_F32LE.into(),
        };
        write_bytes(&sibling(manifest_path, &payload), &bytes)?;
        write_json(manifest_path, &manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: StoreManifest = read_json(manifest_path)?;
        if m.dtype != DTYPE_F32LE {
            return Err(Error::format(manifest_path, format!("unsupported dtype {}", m.dtype)));
        }
        if m.dim == 0 {
            return Err(Error::format(manifest_path, "dim must be positive"));
        }
        let payload_path = sibling(manifest_path, &m.payload);
        let bytes = read_bytes(&payload_path)?;
        let count = m.ids.len();
        let expected = 4 * count * m.dim * (1 + m.token_len);
        if bytes.len() != expected {
            return Err(Error::format(
                &payload_path,
                format!(
                    "payload has {} bytes, manifest ({count} ids, dim {}, token_len {}) implies {expected}",
                    bytes.len(),
                    m.dim,
                    m.token_len
                ),
            ));
        }
        let values = decode_f32le(&bytes, &payload_path)?;
        let mut store = Self::new(m.dim, m.modality)?;
        let pooled_len = count * m.dim;
        let block = m.token_len * m.dim;
        for (i, id) in m.ids.iter().enumerate() {
            let pooled = Tensor::vector(values[i * m.dim..(i + 1) * m.dim].to_vec());
            let tokens = if m.token_len > 0 {
                let start = pooled_len + i * block;
                Some(Tensor::matrix(m.token_len, m.dim, values[start..start + block].to_vec())?)
            } else {
                None
            };
            store.insert(id, pooled, tokens).map_err(|e| match e {
                Error::Data(msg) => Error::format(manifest_path, msg),
                other => other,
            })?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> FeatureStore {
        let mut s = FeatureStore::new(2, Modality::Image).unwrap();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            let x = i as f32;
            s.insert(
                id,
                Tensor::vector(vec![x, 1.0 / (x + 3.0)]),
                Some(Tensor::matrix(2, 2, vec![x, -x, 0.1, 7.0e-12]).unwrap()),
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.json");
        let s = sample_store();
        s.save(&path).unwrap();
        assert_eq!(FeatureStore::load(&path).unwrap(), s);
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.json");
        let mut s = FeatureStore::new(2, Modality::Text).unwrap();
        for id in ["a", "b", "c"] {
            s.insert(id, Tensor::vector(vec![1.0, 0.0]), None).unwrap();
        }
        s.save(&path).unwrap();
        let mut m: StoreManifest = read_json(&path).unwrap();
        m.ids.truncate(2);
        write_json(&path, &m).unwrap();
        assert!(matches!(FeatureStore::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_id_in_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let mut s = FeatureStore::new(1, Modality::Text).unwrap();
        s.insert("a", Tensor::vector(vec![1.0]), None).unwrap();
        s.insert("b", Tensor::vector(vec![2.0]), None).unwrap();
        s.save(&path).unwrap();
        let mut m: StoreManifest = read_json(&path).unwrap();
        m.ids = vec!["a".into(), "a".into()];
        write_json(&path, &m).unwrap();
        assert!(matches!(FeatureStore::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn mixed_token_presence_rejected() {
        let mut s = FeatureStore::new(1, Modality::Image).unwrap();
        s.insert("a", Tensor::vector(vec![1.0]), None).unwrap();
        let t = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(s.insert("b", Tensor::vector(vec![1.0]), Some(t)).is_err());
    }
}
