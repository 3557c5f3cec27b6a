use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use relcap::backbone::{FeatureStore, Modality, SyntheticEncoder, SyntheticWorld};
use relcap::numerics::bundle::TensorBundle;
use relcap::weaksup::{applicable_changes, render_caption, AttributeCatalog, CaptionTemplates, Change};
use relcap::{Error, Result};
use serde::Serialize;

use crate::config::existing;
use crate::output::{Outputs, RunInfo};
use crate::sources::{CATALOG_FILE, ENCODER_STEM, IMAGES_STEM, SCHEMA_FILE, TEXTS_STEM, WORLD_FILE};
use crate::Context;

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Number of items (overrides world.items).
    #[arg(long)]
    pub items: Option<usize>,
    /// Attribute groups (overrides world.groups).
    #[arg(long)]
    pub groups: Option<usize>,
    /// Values per group (overrides world.values_per_group).
    #[arg(long)]
    pub values_per_group: Option<usize>,
    /// Draw new items over the schema, concepts and encoder of an existing synth directory.
    #[arg(long)]
    pub like: Option<PathBuf>,
    /// Item id prefix used with --like.
    #[arg(long, default_value = "heldout", requires = "like")]
    pub prefix: String,
}

/// Checks that every item carries exactly one value of every group.
pub fn check_single_valued(catalog: &AttributeCatalog) -> Result<()> {
    for (id, labels) in catalog.iter() {
        for g in catalog.schema.groups.keys() {
            let n = labels.get(g).map_or(0, |s| s.len());
            if n != 1 {
                return Err(Error::Data(format!("item {id} has {n} values of group {g}")));
            }
        }
    }
    Ok(())
}

/// Every caption the templates can render for a change applicable to some item.
fn caption_vocabulary(catalog: &AttributeCatalog, ctx: &Context) -> Result<BTreeMap<String, Change>> {
    let templates = if ctx.config.captions.paraphrases {
        CaptionTemplates::with_paraphrases()
    } else {
        CaptionTemplates::default()
    };
    let mut out: BTreeMap<String, Change> = BTreeMap::new();
    for (_, labels) in catalog.iter() {
        for change in applicable_changes(&catalog.schema, labels, ctx.config.captions.mode) {
            for i in 0..templates.swap.len().max(templates.add.len()).max(templates.remove.len()) {
                let Ok(caption) = render_caption(&change, &templates, i) else {
                    continue;
                };
                match out.get(&caption) {
                    Some(c) if *c != change => {
                        return Err(Error::Data(format!("caption {caption:?} describes both {c} and {change}")))
                    }
                    Some(_) => {}
                    None => {
                        out.insert(caption, change.clone());
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn run(ctx: &Context, args: SynthArgs) -> Result<()> {
    let mut config = ctx.config.clone();
    if let Some(n) = args.items {
        config.world.items = n;
    }
    if let Some(n) = args.groups {
        config.world.groups = n;
    }
    if let Some(n) = args.values_per_group {
        config.world.values_per_group = n;
    }
    let (world, encoder) = match &args.like {
        Some(dir) => {
            let dir = existing(dir.clone(), "like")?;
            let base = SyntheticWorld::load(&dir.join(WORLD_FILE))?;
            let enc = SyntheticEncoder::<f32>::from_bundle(&TensorBundle::load(
                &dir.join(format!("{ENCODER_STEM}.json")),
            )?)?;
            (base.resample(config.world.items, &args.prefix)?, enc)
        }
        None => (
            SyntheticWorld::generate(&config.world)?,
            SyntheticEncoder::<f32>::new(&config.encoder)?,
        ),
    };
    let catalog = world.to_catalog()?;
    check_single_valued(&catalog)?;

    let mut images = FeatureStore::new(encoder.dim(), Modality::Image)?;
    for id in world.ids() {
        let e = encoder.encode_image(&world, &id)?;
        images.insert(&id, e.pooled, Some(e.tokens))?;
    }
    let mut texts = FeatureStore::new(encoder.dim(), Modality::Text)?;
    for (caption, change) in caption_vocabulary(&catalog, ctx)? {
        let e = encoder.encode_text(&world, &caption, Some(&change))?;
        texts.insert(&caption, e.pooled, Some(e.tokens))?;
    }

    let mut out = Outputs::dir(&args.out, ctx.force)?;
    world.save(&out.path(WORLD_FILE)?)?;
    catalog.schema.save(&out.path(SCHEMA_FILE)?)?;
    catalog.save(&out.path(CATALOG_FILE)?)?;
    encoder.to_bundle().save(&out.bundle(ENCODER_STEM)?)?;
    images.save(&out.bundle(IMAGES_STEM)?)?;
    texts.save(&out.bundle(TEXTS_STEM)?)?;
    log::info!(
        "synthetic world: {} items, {} groups, {} captions",
        world.len(),
        catalog.schema.groups.len(),
        texts.len()
    );
    let options = super::options(&args)?;
    out.finish(&RunInfo {
        command: "synth",
        config: &config,
        options: &options,
    })
}
