use std::path::PathBuf;

use clap::{Args, ValueEnum};
use relcap::evaluation::{
    aggregate_judgments, caption_type_report, default_sweep_values, fiq_score, imfq_map, load_judgments, map_cfq,
    ndcg_cfq, per_query_report, recall_at, recall_report, threshold_sweep, CategoryRecall, Criterion, MetricSummary,
    Question, QuerySpec, ScoreMatrix, Thresholds,
};
use relcap::io::write_csv;
use relcap::numerics::bundle::{read_json, write_json};
use relcap::weaksup::AttributeCatalog;
use relcap::{Error, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{existing, require, ExperimentConfig};
use crate::output::{Outputs, RunInfo};
use crate::sources::{load_catalog, model_and_source, BackboneArgs, CATALOG_FILE, SCHEMA_FILE};
use crate::Context;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// Recall@10/50 per category and their mean.
    Fiq,
    /// mAP for accuracy, reasonableness and relevance judgments, and nDCG.
    Cfq,
    /// mAP against every catalog item whose labels match the query after its change.
    Imfq,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// Trained checkpoint directory; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed score matrix; the model is not run when given.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Query specs (JSON lines).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Judgment records (JSON lines), for cfq.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Attribute catalog, for imfq. Defaults to the synth directory's catalog.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, requires = "catalog")]
    pub schema: Option<PathBuf>,
    /// Per-category recalls (JSON list of {category, r10, r50}), for fiq.
    #[arg(long)]
    pub recalls: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PerQueryCriterionRow {
    criterion: &'static str,
    query_id: String,
    category: String,
    fraction_relevant: f64,
    ap: Option<f64>,
    random_baseline: f64,
}

#[derive(Serialize)]
struct SweepCsvRow {
    criterion: String,
    varied: &'static str,
    threshold: f64,
    positives: usize,
    map: Option<f64>,
}

#[derive(Serialize)]
struct QueryMetricRow {
    query_id: String,
    category: String,
    positives: usize,
    catalog_size: usize,
    value: Option<f64>,
}

fn summary_json(s: &MetricSummary) -> Value {
    json!({ "mean": s.mean, "evaluated": s.evaluated, "excluded": s.excluded })
}

fn query_rows(s: &MetricSummary) -> Vec<QueryMetricRow> {
    s.per_query
        .iter()
        .map(|q| QueryMetricRow {
            query_id: q.query_id.clone(),
            category: q.category.clone(),
            positives: q.positives,
            catalog_size: q.catalog_size,
            value: q.value,
        })
        .collect()
}

fn scores(args: &EvalArgs, config: &ExperimentConfig, queries: &[QuerySpec]) -> Result<ScoreMatrix> {
    if let Some(p) = args.scores.clone().or_else(|| config.paths.scores.clone()) {
        return ScoreMatrix::load(&existing(p, "scores")?);
    }
    let (model, source) = model_and_source(config, &args.backbone, args.checkpoint.clone()).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("eval needs --scores or a backbone: {m}")),
        other => other,
    })?;
    super::score_catalog(&model, &source, queries)
}

fn attribute_catalog(args: &EvalArgs, config: &ExperimentConfig) -> Result<AttributeCatalog> {
    if let Some(c) = args.catalog.clone().or_else(|| config.paths.catalog.clone()) {
        return load_catalog(&existing(c, "catalog")?, args.schema.clone().or_else(|| config.paths.schema.clone()));
    }
    let dir = require(&args.backbone.synth, &config.paths.synth, "catalog", "eval --suite imfq")?;
    let dir = existing(dir, "synth")?;
    load_catalog(&dir.join(CATALOG_FILE), Some(dir.join(SCHEMA_FILE)))
}

fn recall_metrics(scores: &ScoreMatrix, queries: &[QuerySpec], metrics: &mut Map<String, Value>) -> Result<()> {
    for k in [1, 10, 50] {
        metrics.insert(format!("r{k}"), json!(recall_at(scores, queries, k)?));
    }
    Ok(())
}

pub fn run(ctx: &Context, args: EvalArgs) -> Result<()> {
    let config = &ctx.config;
    let mut out = Outputs::dir(&args.out, ctx.force)?;
    let mut metrics = Map::new();
    metrics.insert("suite".into(), json!(args.suite));
    match args.suite {
        Suite::Fiq => {
            if let Some(p) = &args.recalls {
                let categories: Vec<CategoryRecall> = read_json(&existing(p.clone(), "recalls")?)?;
                metrics.insert("fiq_score".into(), json!(fiq_score(&categories)?));
                metrics.insert("categories".into(), serde_json::to_value(&categories)?);
            } else {
                let queries = super::queries(&args.queries, config, "eval --suite fiq (without --recalls)")?;
                let s = scores(&args, config, &queries)?;
                let report = recall_report(&s, &queries)?;
                metrics.insert("fiq_score".into(), json!(report.score));
                metrics.insert("categories".into(), serde_json::to_value(&report.categories)?);
                recall_metrics(&s, &queries, &mut metrics)?;
            }
        }
        Suite::Cfq => {
            let queries = super::queries(&args.queries, config, "eval --suite cfq")?;
            let jpath = require(&args.judgments, &config.paths.judgments, "judgments", "eval --suite cfq")?;
            let judgments = aggregate_judgments(&load_judgments(&existing(jpath, "judgments")?)?)?;
            let s = scores(&args, config, &queries)?;
            let th = Thresholds::default();
            let mut per_query = Vec::new();
            for c in Criterion::ALL {
                let summary = map_cfq(&s, &queries, &judgments, c, &th)?;
                metrics.insert(format!("{}_map", c.name()), summary_json(&summary));
                per_query.extend(per_query_report(&s, &queries, &judgments, c, &th)?.into_iter().map(|r| {
                    PerQueryCriterionRow {
                        criterion: c.name(),
                        query_id: r.query_id,
                        category: r.category,
                        fraction_relevant: r.fraction_relevant,
                        ap: r.ap,
                        random_baseline: r.random_baseline,
                    }
                }));
            }
            metrics.insert("ndcg".into(), summary_json(&ndcg_cfq(&s, &queries, &judgments)?));
            let types = caption_type_report(&s, &queries, &judgments, &th)?;
            metrics.insert("caption_type_notes".into(), json!(types.notes));
            let mut sweep = Vec::new();
            for (c, q, varied) in [
                (Criterion::Accurate, Question::Accurate, "accurate"),
                (Criterion::Reasonable, Question::Reasonable, "reasonable"),
                (Criterion::Relevant, Question::Accurate, "accurate"),
                (Criterion::Relevant, Question::Reasonable, "reasonable"),
            ] {
                for r in threshold_sweep(&s, &queries, &judgments, c, q, &default_sweep_values())? {
                    sweep.push(SweepCsvRow {
                        criterion: r.criterion,
                        varied,
                        threshold: r.threshold,
                        positives: r.positives,
                        map: r.map,
                    });
                }
            }
            write_csv(&out.path("per_query.csv")?, &per_query)?;
            write_csv(&out.path("caption_types.csv")?, &types.rows)?;
            write_csv(&out.path("threshold_sweep.csv")?, &sweep)?;
        }
        Suite::Imfq => {
            let queries = super::queries(&args.queries, config, "eval --suite imfq")?;
            let catalog = attribute_catalog(&args, config)?;
            let s = scores(&args, config, &queries)?;
            let summary = imfq_map(&s, &catalog, &queries)?;
            metrics.insert("imfq_map".into(), summary_json(&summary));
            if queries.iter().all(|q| q.target_id.is_some()) {
                recall_metrics(&s, &queries, &mut metrics)?;
            }
            write_csv(&out.path("per_query.csv")?, &query_rows(&summary))?;
        }
    }
    let options = super::options(&args)?;
    let info = RunInfo {
        command: "eval",
        config,
        options: &options,
    };
    metrics.insert("config_hash".into(), json!(info.hash()?));
    write_json(&out.path("metrics.json")?, &metrics)?;
    out.finish(&info)
}
