pub mod ablate;
pub mod captions;
pub mod embed;
pub mod eval;
pub mod report;
pub mod retrieve;
pub mod synth;
pub mod train;

use relcap::Result;
use serde::Serialize;

/// A command's own flags as recorded in its run record.
pub fn options<T: Serialize>(args: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(args)?)
}

use std::path::PathBuf;

use relcap::evaluation::{load_queries, QuerySpec, ScoreMatrix};
use relcap::fusion::FusionModel;
use relcap::retrieval::{embed_catalog, score_queries};

use crate::config::{existing, require, ExperimentConfig};
use crate::sources::Source;

/// Query specs from `--queries` or `paths.queries`.
pub fn queries(flag: &Option<PathBuf>, config: &ExperimentConfig, why: &str) -> Result<Vec<QuerySpec>> {
    let path = require(flag, &config.paths.queries, "queries", why)?;
    load_queries(&existing(path, "queries")?)
}

/// Scores of every query phrasing against the backbone's whole catalog.
pub fn score_catalog(model: &FusionModel<f32>, source: &Source, queries: &[QuerySpec]) -> Result<ScoreMatrix> {
    let ids = source.catalog_ids();
    let catalog = embed_catalog(model, source.backbone(), &ids)?;
    score_queries(model, source.backbone(), queries, &ids, &catalog)
}
