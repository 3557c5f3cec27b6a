use std::path::PathBuf;

use clap::{Args, ValueEnum};
use relcap::evaluation::{imfq_map, rank_by_score, recall_at, QuerySpec, ScoreMatrix};
use relcap::numerics::bundle::write_json;
use relcap::training::{train, TrainingData};
use relcap::weaksup::load_examples;
use relcap::{Error, Result};
use serde::Serialize;
use serde_json::{json, Map};

use crate::config::existing;
use crate::output::{Outputs, RunInfo};
use crate::sources::{model_and_source, BackboneArgs};
use crate::Context;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Permute the text embedding channels.
    Scramble,
    /// Swap in an independently drawn text projection.
    Mismatch,
    /// Score with the query image alone.
    ImageOnly,
    /// Score with the caption alone.
    TextOnly,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    /// Comma-separated: scramble, mismatch, image-only, text-only. None scores the
    /// unmodified model as a baseline.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub mode: Vec<AblationMode>,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// Trained checkpoint directory; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query specs (JSON lines).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Train on these examples after modifying the encoder.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Epochs for the optional training.
    #[arg(long, requires = "examples")]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Percentage of rows whose query image itself ranks within `k`.
fn image_match(scores: &ScoreMatrix, queries: &[QuerySpec], k: usize) -> Result<f64> {
    let ids = scores.columns();
    let mut hits = 0usize;
    let mut rows = 0usize;
    for q in queries {
        let Some(pos) = ids.iter().position(|c| *c == q.image_id) else {
            continue;
        };
        for p in 0..q.phrasings.len() {
            let row: Vec<f64> = scores.row(&q.query_id, p)?.iter().map(|&x| x as f64).collect();
            let order = rank_by_score(&row, ids)?;
            rows += 1;
            hits += usize::from(order.iter().take(k).any(|&i| i == pos));
        }
    }
    if rows == 0 {
        return Err(Error::Data("no query image is in the catalog".into()));
    }
    Ok(100.0 * hits as f64 / rows as f64)
}

/// True when every phrasing of every query produced the same scores.
fn phrasing_invariant(scores: &ScoreMatrix, queries: &[QuerySpec]) -> Result<bool> {
    for q in queries {
        let first = scores.row(&q.query_id, 0)?;
        for p in 1..q.phrasings.len() {
            if scores.row(&q.query_id, p)? != first {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn run(ctx: &Context, args: AblateArgs) -> Result<()> {
    let mut config = ctx.config.clone();
    for m in &args.mode {
        match m {
            AblationMode::Scramble => config.ablation.scramble = true,
            AblationMode::Mismatch => config.ablation.mismatch = true,
            AblationMode::ImageOnly => config.ablation.image_only = true,
            AblationMode::TextOnly => config.ablation.text_only = true,
        }
    }
    config.ablation.validate()?;
    if let Some(e) = args.epochs {
        config.train.epochs = Some(e);
    }
    let queries = super::queries(&args.queries, &config, "ablate")?;
    let (mut model, mut source) = model_and_source(&config, &args.backbone, args.checkpoint.clone())?;
    source.apply_ablation(&config.ablation, config.seed)?;

    let mut trained_steps = 0;
    if let Some(p) = &args.examples {
        let examples = load_examples(&existing(p.clone(), "examples")?)?;
        let log = train(&mut model, source.backbone_mut(), &TrainingData::Fixed(&examples), &config.train)?;
        trained_steps = log.steps.len();
    }
    if config.ablation.image_only {
        model = model.with_mode("img_only", config.seed)?;
    } else if config.ablation.text_only {
        model = model.with_mode("txt_only", config.seed)?;
    }

    let scores = super::score_catalog(&model, &source, &queries)?;
    let n = scores.columns().len();
    let mut metrics = Map::new();
    metrics.insert("modes".into(), json!(config.ablation.names()));
    metrics.insert("fusion_mode".into(), json!(model.mode()));
    metrics.insert("trained_steps".into(), json!(trained_steps));
    metrics.insert("queries".into(), json!(queries.len()));
    metrics.insert("catalog_size".into(), json!(n));
    metrics.insert("chance_r1".into(), json!(100.0 / n as f64));
    metrics.insert("chance_r10".into(), json!(100.0 * 10.min(n) as f64 / n as f64));
    if queries.iter().all(|q| q.target_id.is_some()) {
        for k in [1, 10, 50] {
            metrics.insert(format!("r{k}"), json!(recall_at(&scores, &queries, k)?));
        }
    }
    if queries.iter().all(|q| q.change.is_some()) {
        if let Ok(catalog) = source.attribute_catalog(config.paths.catalog.clone(), config.paths.schema.clone()) {
            let s = imfq_map(&scores, &catalog, &queries)?;
            metrics.insert(
                "imfq_map".into(),
                json!({ "mean": s.mean, "evaluated": s.evaluated, "excluded": s.excluded }),
            );
        }
    }
    if let Ok(v) = image_match(&scores, &queries, 1) {
        metrics.insert("image_match_r1".into(), json!(v));
        metrics.insert("image_match_r10".into(), json!(image_match(&scores, &queries, 10)?));
    }
    metrics.insert("phrasing_invariant".into(), json!(phrasing_invariant(&scores, &queries)?));

    let mut out = Outputs::dir(&args.out, ctx.force)?;
    let options = super::options(&args)?;
    let info = RunInfo {
        command: "ablate",
        config: &config,
        options: &options,
    };
    metrics.insert("config_hash".into(), json!(info.hash()?));
    write_json(&out.path("metrics.json")?, &metrics)?;
    out.finish(&info)
}
