use std::path::PathBuf;

use clap::Args;
use relcap::backbone::FeatureStore;
use relcap::numerics::bundle::write_json;
use relcap::retrieval::{embed_catalog, score_queries, top_k, Hit};
use relcap::{Error, Result};
use serde::Serialize;

use crate::config::existing;
use crate::output::{Outputs, RunInfo};
use crate::sources::{model_and_source, BackboneArgs};
use crate::Context;

#[derive(Args, Debug, Serialize)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// Trained checkpoint directory; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query specs (JSON lines).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Hits per query phrasing; clamped to the catalog size.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Catalog embeddings written by `embed`, instead of embedding the catalog here.
    #[arg(long)]
    pub catalog_embeddings: Option<PathBuf>,
    /// Also write the full score matrix here.
    #[arg(long)]
    #[serde(skip)]
    pub scores_out: Option<PathBuf>,
    /// Ranked results (JSON).
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Ranked {
    query_id: String,
    phrasing: usize,
    hits: Vec<Hit>,
}

#[derive(Serialize)]
struct Retrieval {
    config_hash: String,
    k: usize,
    catalog_size: usize,
    results: Vec<Ranked>,
}

pub fn run(ctx: &Context, args: RetrieveArgs) -> Result<()> {
    let config = &ctx.config;
    let queries = super::queries(&args.queries, config, "retrieve")?;
    let (model, source) = model_and_source(config, &args.backbone, args.checkpoint.clone())?;
    let (ids, catalog) = match &args.catalog_embeddings {
        Some(p) => {
            let store = FeatureStore::load(&existing(p.clone(), "catalog-embeddings")?)?;
            if store.dim() != model.dim() {
                return Err(Error::Config(format!(
                    "catalog embeddings have dimension {}, the model {}",
                    store.dim(),
                    model.dim()
                )));
            }
            let ids = store.ids().to_vec();
            let embs = ids.iter().map(|id| store.pooled(id).cloned()).collect::<Result<Vec<_>>>()?;
            (ids, embs)
        }
        None => {
            let ids = source.catalog_ids();
            let embs = embed_catalog(&model, source.backbone(), &ids)?;
            (ids, embs)
        }
    };
    let scores = score_queries(&model, source.backbone(), &queries, &ids, &catalog)?;
    if args.k > ids.len() {
        log::warn!("k = {} exceeds the catalog size {}; returning every item", args.k, ids.len());
    }
    let k = args.k.min(ids.len());
    let results = scores
        .rows()
        .iter()
        .map(|r| {
            Ok(Ranked {
                query_id: r.query_id.clone(),
                phrasing: r.phrasing,
                hits: top_k(scores.row(&r.query_id, r.phrasing)?, &ids, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Outputs::file(&args.out, ctx.force)?;
    if let Some(p) = &args.scores_out {
        let manifest = out.extra(p)?;
        out.extra(&p.with_extension("bin"))?;
        scores.save(&manifest)?;
    }
    let options = super::options(&args)?;
    let info = RunInfo {
        command: "retrieve",
        config,
        options: &options,
    };
    write_json(
        &args.out,
        &Retrieval {
            config_hash: info.hash()?,
            k,
            catalog_size: ids.len(),
            results,
        },
    )?;
    out.finish(&info)
}
