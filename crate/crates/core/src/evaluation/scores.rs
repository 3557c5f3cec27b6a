use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::bundle::{
    decode_f32le, default_payload_name, encode_f32le, read_bytes, read_json, sibling, write_bytes, write_json,
    DTYPE_F32LE,
};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRow {
    pub query_id: String,
    pub phrasing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreManifest {
    pub kind: String,
    pub rows: Vec<ScoreRow>,
    pub columns: Vec<String>,
    pub payload: String,
    pub dtype: String,
}

pub const SCORE_MATRIX_KIND: &str = "score_matrix";

/// Scores `s[(query, phrasing), catalog id]`, one row per query phrasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<ScoreRow>,
    columns: Vec<String>,
    data: Vec<f32>,
    row_index: HashMap<(String, usize), usize>,
    column_index: HashMap<String, usize>,
}

impl ScoreMatrix {
    pub fn new(columns: Vec<String>) -> Result<Self> {
        let mut column_index = HashMap::with_capacity(columns.len());
        for (i, c) in columns.iter().enumerate() {
            if column_index.insert(c.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate catalog id {c}")));
            }
        }
        Ok(Self {
            rows: Vec::new(),
            columns,
            data: Vec::new(),
            row_index: HashMap::new(),
            column_index,
        })
    }

    pub fn push_row(&mut self, query_id: &str, phrasing: usize, scores: &[f32]) -> Result<()> {
        if scores.len() != self.columns.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} catalog items",
                scores.len(),
                self.columns.len()
            )));
        }
        if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "score ({query_id}, {phrasing}, {}) is {}",
                self.columns[j], scores[j]
            )));
        }
        let key = (query_id.to_string(), phrasing);
        if self.row_index.contains_key(&key) {
            return Err(Error::Data(format!("duplicate score row ({query_id}, {phrasing})")));
        }
        self.row_index.insert(key, self.rows.len());
        self.rows.push(ScoreRow {
            query_id: query_id.to_string(),
            phrasing,
        });
        self.data.extend_from_slice(scores);
        Ok(())
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn has_column(&self, id: &str) -> bool {
        self.column_index.contains_key(id)
    }

    pub fn row(&self, query_id: &str, phrasing: usize) -> Result<&[f32]> {
        let r = *self
            .row_index
            .get(&(query_id.to_string(), phrasing))
            .ok_or_else(|| Error::Data(format!("no scores for ({query_id}, phrasing {phrasing})")))?;
        let n = self.columns.len();
        Ok(&self.data[r * n..(r + 1) * n])
    }

    /// Scores of `query_id`/`phrasing` for the given catalog ids, in that order.
    pub fn scores_for(&self, query_id: &str, phrasing: usize, ids: &[String]) -> Result<Vec<f64>> {
        let row = self.row(query_id, phrasing)?;
        ids.iter()
            .map(|id| {
                self.column_index
                    .get(id)
                    .map(|&j| row[j] as f64)
                    .ok_or_else(|| Error::Data(format!("no score column for catalog id {id}")))
            })
            .collect()
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let payload = default_payload_name(manifest_path);
        write_bytes(&sibling(manifest_path, &payload), &encode_f32le(&self.data))?;
        write_json(
            manifest_path,
            &ScoreManifest {
                kind: SCORE_MATRIX_KIND.into(),
                rows: self.rows.clone(),
                columns: self.columns.clone(),
                payload,
                dtype: DTYPE_F32LE.into(),
            },
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: ScoreManifest = read_json(manifest_path)?;
        if m.kind != SCORE_MATRIX_KIND {
            return Err(Error::format(manifest_path, format!("expected a score matrix, found {}", m.kind)));
        }
        if m.dtype != DTYPE_F32LE {
            return Err(Error::format(manifest_path, format!("unsupported dtype {}", m.dtype)));
        }
        let payload_path = sibling(manifest_path, &m.payload);
        let data = decode_f32le(&read_bytes(&payload_path)?, &payload_path)?;
        let n = m.columns.len();
        if data.len() != m.rows.len() * n {
            return Err(Error::format(
                &payload_path,
                format!("{} values for {} rows x {n} columns", data.len(), m.rows.len()),
            ));
        }
        let mut out = Self::new(m.columns).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        for (i, r) in m.rows.iter().enumerate() {
            out.push_row(&r.query_id, r.phrasing, &data[i * n..(i + 1) * n])
                .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        }
        Ok(out)
    }
}
