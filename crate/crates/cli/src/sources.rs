use std::path::{Path, PathBuf};

use clap::Args;
use relcap::backbone::{Backbone, FeatureStore, StoreBackbone, SyntheticBackbone, SyntheticEncoder, SyntheticWorld};
use relcap::fusion::FusionModel;
use relcap::numerics::bundle::TensorBundle;
use relcap::rng::derive_seed;
use relcap::weaksup::{AttributeCatalog, Schema};
use relcap::{Error, Result};
use serde::Serialize;

use crate::config::{existing, Ablation, ExperimentConfig, Paths};
use crate::output::Outputs;

pub const WORLD_FILE: &str = "world.json";
pub const ENCODER_STEM: &str = "encoder";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const IMAGES_STEM: &str = "images";
pub const TEXTS_STEM: &str = "texts";
pub const MODEL_STEM: &str = "model";

/// Where image and caption encodings come from.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct BackboneArgs {
    /// Directory written by `relcap synth` (synthetic encoder over its world).
    #[arg(long, conflicts_with = "images")]
    pub synth: Option<PathBuf>,
    /// Image feature store manifest.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Caption feature store manifest, keyed by caption text.
    #[arg(long, requires = "images")]
    pub texts: Option<PathBuf>,
}

#[allow(clippy::large_enum_variant)]
pub enum Source {
    Synthetic(SyntheticBackbone<f32>),
    Store(StoreBackbone),
}

impl Source {
    /// Loads the backbone named by flags or config. A checkpoint's encoder replaces
    /// the one stored with the synthetic world.
    pub fn load(args: &BackboneArgs, paths: &Paths, encoder: Option<SyntheticEncoder<f32>>) -> Result<Self> {
        if let Some(dir) = args.synth.clone().or_else(|| paths.synth.clone()) {
            let dir = existing(dir, "synth")?;
            let world = SyntheticWorld::load(&dir.join(WORLD_FILE))?;
            let encoder = match encoder {
                Some(e) => e,
                None => SyntheticEncoder::from_bundle(&TensorBundle::load(&dir.join(format!("{ENCODER_STEM}.json")))?)?,
            };
            return Ok(Self::Synthetic(SyntheticBackbone::new(world, encoder)?));
        }
        if let Some(images) = args.images.clone().or_else(|| paths.images.clone()) {
            let images = FeatureStore::load(&existing(images, "images")?)?;
            let texts = match args.texts.clone().or_else(|| paths.texts.clone()) {
                Some(t) => Some(FeatureStore::load(&existing(t, "texts")?)?),
                None => None,
            };
            return Ok(Self::Store(StoreBackbone::new(images, texts)?));
        }
        Err(Error::Config(
            "no backbone: pass --synth DIR or --images FILE (or set paths.synth / paths.images)".into(),
        ))
    }

    pub fn backbone(&self) -> &dyn Backbone<f32> {
        match self {
            Self::Synthetic(b) => b,
            Self::Store(b) => b,
        }
    }

    pub fn backbone_mut(&mut self) -> &mut dyn Backbone<f32> {
        match self {
            Self::Synthetic(b) => b,
            Self::Store(b) => b,
        }
    }

    pub fn encoder(&self) -> Option<&SyntheticEncoder<f32>> {
        match self {
            Self::Synthetic(b) => Some(&b.encoder),
            Self::Store(_) => None,
        }
    }

    pub fn catalog_ids(&self) -> Vec<String> {
        self.backbone().image_ids()
    }

    /// Scrambles or mismatches the synthetic text encoder.
    pub fn apply_ablation(&mut self, ablation: &Ablation, seed: u64) -> Result<()> {
        if !(ablation.scramble || ablation.mismatch) {
            return Ok(());
        }
        let Self::Synthetic(b) = self else {
            return Err(Error::Config(
                "scramble and mismatch ablations need the synthetic backbone (--synth)".into(),
            ));
        };
        if ablation.scramble {
            b.encoder = b.encoder.clone().scramble_text_channels(derive_seed(seed, "scramble"))?;
        }
        if ablation.mismatch {
            b.encoder = b.encoder.clone().mismatch_text_module(derive_seed(seed, "mismatch"));
        }
        Ok(())
    }

    pub fn set_training(&mut self, image: bool, text: bool) -> Result<()> {
        match self {
            Self::Synthetic(b) => {
                b.train_image = image;
                b.train_text = text;
                Ok(())
            }
            Self::Store(_) if image || text => Err(Error::Config(
                "feature stores are frozen; --train-image/--train-text need --synth".into(),
            )),
            Self::Store(_) => Ok(()),
        }
    }

    /// The attribute catalog of the synthetic world, or one loaded from `--catalog`.
    pub fn attribute_catalog(&self, catalog: Option<PathBuf>, schema: Option<PathBuf>) -> Result<AttributeCatalog> {
        match (catalog, self) {
            (Some(path), _) => load_catalog(&existing(path, "catalog")?, schema),
            (None, Self::Synthetic(b)) => b.world.to_catalog(),
            (None, Self::Store(_)) => Err(Error::Config(
                "attribute labels needed: pass --catalog (or paths.catalog in the config)".into(),
            )),
        }
    }
}

pub fn load_catalog(path: &Path, schema: Option<PathBuf>) -> Result<AttributeCatalog> {
    let schema = match schema {
        Some(p) => Some(Schema::load(&existing(p, "schema")?)?),
        None => None,
    };
    AttributeCatalog::load(path, schema)
}

pub struct Checkpoint {
    pub model: FusionModel<f32>,
    pub encoder: Option<SyntheticEncoder<f32>>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let dir = existing(dir.to_path_buf(), "checkpoint")?;
    let model = FusionModel::from_bundle(&TensorBundle::load(&dir.join(format!("{MODEL_STEM}.json")))?)?;
    let enc_path = dir.join(format!("{ENCODER_STEM}.json"));
    let encoder = if enc_path.exists() {
        Some(SyntheticEncoder::from_bundle(&TensorBundle::load(&enc_path)?)?)
    } else {
        None
    };
    Ok(Checkpoint { model, encoder })
}

pub fn save_checkpoint(out: &mut Outputs, model: &FusionModel<f32>, encoder: Option<&SyntheticEncoder<f32>>) -> Result<()> {
    model.to_bundle().save(&out.bundle(MODEL_STEM)?)?;
    if let Some(e) = encoder {
        e.to_bundle().save(&out.bundle(ENCODER_STEM)?)?;
    }
    Ok(())
}

/// The model from `checkpoint` (with its encoder) or a fresh one from the config,
/// with the backbone it runs on.
pub fn model_and_source(
    config: &ExperimentConfig,
    args: &BackboneArgs,
    checkpoint: Option<PathBuf>,
) -> Result<(FusionModel<f32>, Source)> {
    match checkpoint.or_else(|| config.paths.checkpoint.clone()) {
        Some(dir) => {
            let ck = load_checkpoint(&dir)?;
            let source = Source::load(args, &config.paths, ck.encoder)?;
            check_dim(&ck.model, &source)?;
            Ok((ck.model, source))
        }
        None => {
            let source = Source::load(args, &config.paths, None)?;
            let model = FusionModel::new(&config.fusion, source.backbone().dim(), config.seed)?;
            Ok((model, source))
        }
    }
}

fn check_dim(model: &FusionModel<f32>, source: &Source) -> Result<()> {
    let d = source.backbone().dim();
    if model.dim() != d {
        return Err(Error::Config(format!(
            "checkpoint dimension {} does not match backbone dimension {d}",
            model.dim()
        )));
    }
    Ok(())
}
