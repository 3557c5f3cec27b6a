use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::weaksup::Change;

/// Phrasings collected per judged query.
pub const CFQ_PHRASINGS: usize = 4;

/// What a caption talks about. Groups overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionType {
    Elements,
    Pattern,
    Shape,
    Color,
    Conjunction,
    Negation,
    Modification,
    Relative,
}

impl CaptionType {
    pub fn name(self) -> &'static str {
        match self {
            Self::Elements => "elements",
            Self::Pattern => "pattern",
            Self::Shape => "shape",
            Self::Color => "color",
            Self::Conjunction => "conjunction",
            Self::Negation => "negation",
            Self::Modification => "modification",
            Self::Relative => "relative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub image_id: String,
    #[serde(default)]
    pub category: String,
    pub phrasings: Vec<String>,
    #[serde(default)]
    pub caption_types: Vec<CaptionType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<Change>,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        if self.phrasings.is_empty() {
            return Err(Error::Data(format!("query {} has no phrasing", self.query_id)));
        }
        Ok(())
    }

    pub fn validate_cfq(&self) -> Result<()> {
        self.validate()?;
        if self.phrasings.len() != CFQ_PHRASINGS {
            return Err(Error::Data(format!(
                "query {} has {} phrasings, expected {CFQ_PHRASINGS}",
                self.query_id,
                self.phrasings.len()
            )));
        }
        Ok(())
    }
}

/// Loads and validates query specs; ids must be unique.
pub fn load_queries(path: &Path) -> Result<Vec<QuerySpec>> {
    let queries: Vec<QuerySpec> = read_jsonl(path)?;
    check_queries(&queries)?;
    Ok(queries)
}

pub fn save_queries(path: &Path, queries: &[QuerySpec]) -> Result<()> {
    write_jsonl(path, queries)
}

pub fn check_queries(queries: &[QuerySpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for q in queries {
        q.validate()?;
        if !seen.insert(q.query_id.as_str()) {
            return Err(Error::Data(format!("duplicate query id {}", q.query_id)));
        }
    }
    Ok(())
}

pub fn by_id(queries: &[QuerySpec]) -> HashMap<&str, &QuerySpec> {
    queries.iter().map(|q| (q.query_id.as_str(), q)).collect()
}
