use std::path::PathBuf;

use clap::Args;
use relcap::backbone::{FeatureStore, Modality};
use relcap::retrieval::{embed_catalog, embed_query};
use relcap::Result;
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{Outputs, RunInfo};
use crate::sources::{model_and_source, BackboneArgs};
use crate::Context;

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// Trained checkpoint directory; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also embed these queries, one entry per phrasing (`{query_id}#{phrasing}`).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn run(ctx: &Context, args: EmbedArgs) -> Result<()> {
    let config = &ctx.config;
    let (model, source) = model_and_source(config, &args.backbone, args.checkpoint.clone())?;
    let ids = source.catalog_ids();
    let embs = embed_catalog(&model, source.backbone(), &ids)?;
    let mut store = FeatureStore::new(model.dim(), Modality::Image)?;
    for (id, e) in ids.iter().zip(embs) {
        store.insert(id, e, None)?;
    }

    let query_store = match &args.queries {
        Some(_) => {
            let queries = super::queries(&args.queries, config, "embed")?;
            let rows: Vec<(String, &str, &str, Option<&relcap::weaksup::Change>)> = queries
                .iter()
                .flat_map(|q| {
                    q.phrasings
                        .iter()
                        .enumerate()
                        .map(move |(p, c)| (format!("{}#{p}", q.query_id), q.image_id.as_str(), c.as_str(), q.change.as_ref()))
                })
                .collect();
            let embs = rows
                .par_iter()
                .map(|(_, img, cap, change)| embed_query(&model, source.backbone(), img, cap, *change))
                .collect::<Result<Vec<_>>>()?;
            let mut qs = FeatureStore::new(model.dim(), Modality::Text)?;
            for ((id, ..), e) in rows.iter().zip(embs) {
                qs.insert(id, e, None)?;
            }
            Some(qs)
        }
        None => None,
    };

    let mut out = Outputs::dir(&args.out, ctx.force)?;
    store.save(&out.bundle("catalog")?)?;
    if let Some(qs) = query_store {
        qs.save(&out.bundle("queries")?)?;
    }
    let options = super::options(&args)?;
    out.finish(&RunInfo {
        command: "embed",
        config,
        options: &options,
    })
}
