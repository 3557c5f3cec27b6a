use std::path::PathBuf;

use clap::Args;
use relcap::training::{train, Regime, Schedule, TrainingData};
use relcap::weaksup::{build_index, load_examples, CaptionTemplates, EpochOptions, ExampleSource};
use relcap::{Error, Result};
use serde::Serialize;

use crate::config::{existing, require};
use crate::output::{Outputs, RunInfo};
use crate::sources::{load_checkpoint, save_checkpoint, BackboneArgs, Source};
use crate::Context;

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// Training examples (JSON lines), reshuffled every epoch.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Draw this many fresh weakly supervised examples every epoch instead.
    #[arg(long, conflicts_with = "examples")]
    pub sample: Option<usize>,
    /// Attribute catalog for --sample when the backbone is not synthetic.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long, requires = "catalog")]
    pub schema: Option<PathBuf>,
    /// Continue from a checkpoint directory (sequential regimes).
    #[arg(long)]
    pub resume_from: Option<PathBuf>,
    /// Epoch count (overrides the regime default).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// fiq | imfq | disrupted
    #[arg(long)]
    pub regime: Option<Regime>,
    /// fiq | imfq
    #[arg(long)]
    pub schedule: Option<Schedule>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fusion mode for a fresh model: va | af | raf | img_only | txt_only.
    #[arg(long, conflicts_with = "resume_from")]
    pub mode: Option<String>,
    /// Residual weight for raf.
    #[arg(long, conflicts_with = "resume_from")]
    pub alpha: Option<f64>,
    /// Also train the synthetic image projection.
    #[arg(long)]
    pub train_image: bool,
    /// Also train the synthetic text projection.
    #[arg(long)]
    pub train_text: bool,
    /// Permute the synthetic text channels before training.
    #[arg(long)]
    pub scramble: bool,
    /// Replace the synthetic text projection before training.
    #[arg(long)]
    pub mismatch: bool,
    /// Checkpoint directory to write.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Summary {
    config_hash: String,
    mode: String,
    epochs: usize,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    tau: f64,
    epoch_lrs: Vec<f64>,
}

pub fn run(ctx: &Context, args: TrainArgs) -> Result<()> {
    let mut config = ctx.config.clone();
    let t = &mut config.train;
    t.epochs = args.epochs.or(t.epochs);
    t.regime = args.regime.unwrap_or(t.regime);
    t.schedule = args.schedule.unwrap_or(t.schedule);
    t.base_lr = args.base_lr.unwrap_or(t.base_lr);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.validate()?;
    if let Some(m) = &args.mode {
        config.fusion.mode = m.clone();
    }
    if let Some(a) = args.alpha {
        config.fusion.alpha = a;
    }
    config.ablation.scramble |= args.scramble;
    config.ablation.mismatch |= args.mismatch;
    config.ablation.validate()?;

    let (mut model, mut source) = match &args.resume_from {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if config.ablation.scramble || config.ablation.mismatch {
                log::warn!("resuming: the checkpoint's encoder is used as is, encoder ablations are not reapplied");
            }
            let source = Source::load(&args.backbone, &config.paths, ck.encoder)?;
            (ck.model, source)
        }
        None => {
            let mut source = Source::load(&args.backbone, &config.paths, None)?;
            source.apply_ablation(&config.ablation, config.seed)?;
            let model = relcap::fusion::FusionModel::new(&config.fusion, source.backbone().dim(), config.seed)?;
            (model, source)
        }
    };
    if model.dim() != source.backbone().dim() {
        return Err(Error::Config(format!(
            "checkpoint dimension {} does not match backbone dimension {}",
            model.dim(),
            source.backbone().dim()
        )));
    }
    source.set_training(args.train_image, args.train_text)?;

    let fixed;
    let index;
    let data = match args.sample {
        Some(n) => {
            let catalog = source.attribute_catalog(
                args.catalog.clone().or_else(|| config.paths.catalog.clone()),
                args.schema.clone().or_else(|| config.paths.schema.clone()),
            )?;
            index = build_index(&catalog)?;
            let templates = if config.captions.paraphrases {
                CaptionTemplates::with_paraphrases()
            } else {
                CaptionTemplates::default()
            };
            TrainingData::Sampled {
                index: &index,
                per_epoch: n,
                options: EpochOptions {
                    mode: config.captions.mode,
                    templates,
                    source: ExampleSource::Imfq,
                },
            }
        }
        None => {
            let path = require(&args.examples, &config.paths.examples, "examples", "train")?;
            fixed = load_examples(&existing(path, "examples")?)?;
            TrainingData::Fixed(&fixed)
        }
    };

    let mut out = Outputs::dir(&args.out, ctx.force)?;
    let log = train(&mut model, source.backbone_mut(), &data, &config.train)?;
    log::info!(
        "trained {} steps in {:.1}s, final loss {:?}",
        log.steps.len(),
        log.wall_clock_secs,
        log.final_loss()
    );

    let options = super::options(&args)?;
    let info = RunInfo {
        command: "train",
        config: &config,
        options: &options,
    };
    save_checkpoint(&mut out, &model, source.encoder())?;
    log.write_csv(&out.path("log.csv")?)?;
    relcap::numerics::bundle::write_json(
        &out.path("summary.json")?,
        &Summary {
            config_hash: info.hash()?,
            mode: model.mode().to_string(),
            epochs: config.train.epochs(),
            steps: log.steps.len(),
            initial_loss: log.steps.first().map(|s| s.loss),
            final_loss: log.final_loss(),
            tau: model.tau() as f64,
            epoch_lrs: log.epoch_lrs.clone(),
        },
    )?;
    out.finish(&info)
}
