use std::path::Path;

use serde::{Deserialize, Serialize};

use super::change::Change;
use crate::error::Result;
use crate::io::{read_jsonl, write_jsonl};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleSource {
    /// Human-written relative caption with one labeled target.
    Fiq,
    /// Generated from an attribute-label difference.
    Imfq,
    Synthetic,
}

/// A (query image, relative caption, target image) triplet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub caption: String,
    pub target_id: String,
    pub source: ExampleSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<Change>,
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    read_jsonl(path)
}

pub fn save_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    write_jsonl(path, examples)
}
