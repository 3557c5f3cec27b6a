use std::path::PathBuf;

use clap::Args;
use relcap::evaluation::{save_queries, CaptionType, QuerySpec, CFQ_PHRASINGS};
use relcap::weaksup::{
    build_index, generate_epoch, render_caption, save_examples, validate_example, CaptionTemplates, Change,
    EpochOptions, ExampleSource, SampleMode,
};
use relcap::Result;
use serde::Serialize;

use crate::config::existing;
use crate::output::{Outputs, RunInfo};
use crate::sources::{load_catalog, CATALOG_FILE, SCHEMA_FILE};
use crate::Context;

#[derive(Args, Debug, Serialize)]
pub struct CaptionArgs {
    /// Attribute catalog (JSON lines of image_id and attributes).
    #[arg(long, conflicts_with = "synth")]
    pub catalog: Option<PathBuf>,
    /// Schema for --catalog; inferred from the catalog when absent.
    #[arg(long, requires = "catalog")]
    pub schema: Option<PathBuf>,
    /// Synth directory whose catalog to sample from.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Number of examples.
    #[arg(long)]
    pub count: usize,
    /// swap | toggle (overrides captions.mode).
    #[arg(long)]
    pub mode: Option<SampleMode>,
    /// Write evaluation queries (several phrasings, a target and the change) instead
    /// of training examples.
    #[arg(long)]
    pub queries: bool,
    /// Output file (JSON lines).
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

fn caption_types(change: &Change) -> Vec<CaptionType> {
    let mut out = match change.group() {
        "color" => vec![CaptionType::Color],
        "pattern" => vec![CaptionType::Pattern],
        "sleeve" | "neckline" | "length" | "fit" => vec![CaptionType::Shape],
        _ => vec![],
    };
    out.push(match change {
        Change::Swap { .. } => CaptionType::Modification,
        Change::Add { .. } => CaptionType::Elements,
        Change::Remove { .. } => CaptionType::Negation,
    });
    out
}

pub fn run(ctx: &Context, args: CaptionArgs) -> Result<()> {
    let paths = &ctx.config.paths;
    let catalog = match (&args.catalog, &args.synth) {
        (Some(c), _) => load_catalog(&existing(c.clone(), "catalog")?, args.schema.clone())?,
        (None, Some(dir)) => {
            let dir = existing(dir.clone(), "synth")?;
            load_catalog(&dir.join(CATALOG_FILE), Some(dir.join(SCHEMA_FILE)))?
        }
        (None, None) => {
            let c = crate::config::require(&None, &paths.catalog, "catalog", "gen-captions")?;
            load_catalog(&existing(c, "catalog")?, paths.schema.clone())?
        }
    };
    let mode = args.mode.unwrap_or(ctx.config.captions.mode);
    let templates = if ctx.config.captions.paraphrases && !args.queries {
        CaptionTemplates::with_paraphrases()
    } else {
        CaptionTemplates::default()
    };
    let index = build_index(&catalog)?;
    let options = EpochOptions {
        mode,
        templates,
        source: ExampleSource::Imfq,
    };
    let examples = generate_epoch(&index, args.count, ctx.config.seed, &options)?;
    for ex in &examples {
        validate_example(&catalog, ex, mode)?;
    }

    let out = Outputs::file(&args.out, ctx.force)?;
    if args.queries {
        let phrasing_templates = CaptionTemplates::with_paraphrases();
        let width = args.count.saturating_sub(1).to_string().len().max(4);
        let queries = examples
            .into_iter()
            .enumerate()
            .map(|(i, ex)| {
                let change = ex.change.expect("sampled examples record their change");
                let phrasings = (0..CFQ_PHRASINGS)
                    .map(|p| render_caption(&change, &phrasing_templates, p))
                    .collect::<Result<Vec<_>>>()?;
                Ok(QuerySpec {
                    query_id: format!("q{i:0width$}"),
                    image_id: ex.query_id,
                    category: change.group().to_string(),
                    phrasings,
                    caption_types: caption_types(&change),
                    target_id: Some(ex.target_id),
                    change: Some(change),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        save_queries(&args.out, &queries)?;
    } else {
        save_examples(&args.out, &examples)?;
    }
    log::info!("wrote {} {} to {}", args.count, if args.queries { "queries" } else { "examples" }, args.out.display());
    let mut config = ctx.config.clone();
    config.captions.mode = mode;
    let options = super::options(&args)?;
    out.finish(&RunInfo {
        command: "gen-captions",
        config: &config,
        options: &options,
    })
}
