use std::borrow::Cow;
use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batches::make_batches;
use super::config::{lr_schedule, TrainConfig};
use super::loss::contrastive_loss;
use crate::backbone::{Backbone, Encoding};
use crate::error::{Error, Result};
use crate::fusion::model::{FuseTrace, ModelGrads, TAU_MAX, TAU_MIN};
use crate::fusion::{FusionInput, FusionModel};
use crate::numerics::{adam_step, AdamState, Real, Tensor};
use crate::rng::derive_seed;
use crate::weaksup::{generate_epoch, AttributeIndex, EpochOptions, TrainingExample};

/// Examples per gradient group. Groups are summed in a fixed order, so the result
/// does not depend on how many threads computed them.
const GROUP: usize = 4;

/// Where each epoch's examples come from.
#[derive(Clone, Debug)]
pub enum TrainingData<'a> {
    /// The same examples every epoch, reshuffled.
    Fixed(&'a [TrainingExample]),
    /// A fresh weakly supervised draw every epoch.
    Sampled {
        index: &'a AttributeIndex,
        per_epoch: usize,
        options: EpochOptions,
    },
}

impl TrainingData<'_> {
    fn epoch(&self, seed: u64, epoch: usize) -> Result<Cow<'_, [TrainingExample]>> {
        match self {
            Self::Fixed(examples) => {
                if examples.is_empty() {
                    return Err(Error::Data("training set is empty".into()));
                }
                Ok(Cow::Borrowed(examples))
            }
            Self::Sampled { index, per_epoch, options } => {
                let s = derive_seed(seed, &format!("sample:{epoch}"));
                Ok(Cow::Owned(generate_epoch(index, *per_epoch, s, options)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_lrs: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.steps.len());
        (n > 0).then(|| self.steps[self.steps.len() - n..].iter().map(|s| s.loss).sum::<f64>() / n as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_csv(path, &self.steps)
    }

    pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Loss value and accumulated gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome<F: Real> {
    pub loss: F,
    pub tau: F,
    pub model: ModelGrads<F>,
    /// Ordered as the backbone's trainable parameters.
    pub backbone: Vec<Tensor<F>>,
}

struct ExampleForward<F: Real> {
    query_image: Encoding<F>,
    caption: Encoding<F>,
    query: FuseTrace<F>,
    target_image: Encoding<F>,
    target: FuseTrace<F>,
}

impl<F: Real> ExampleForward<F> {
    fn input(&self) -> FusionInput<'_, F> {
        FusionInput {
            img_pooled: &self.query_image.pooled,
            txt_pooled: &self.caption.pooled,
            img_tokens: &self.query_image.tokens,
            txt_tokens: &self.caption.tokens,
        }
    }
}

fn forward_example<F: Real, B: Backbone<F> + ?Sized>(
    model: &FusionModel<F>,
    backbone: &B,
    ex: &TrainingExample,
) -> Result<ExampleForward<F>> {
    let query_image = backbone.encode_image(&ex.query_id)?;
    let caption = backbone.encode_text(&ex.caption, ex.change.as_ref())?;
    let target_image = backbone.encode_image(&ex.target_id)?;
    let query = model.fuse_traced(&FusionInput {
        img_pooled: &query_image.pooled,
        txt_pooled: &caption.pooled,
        img_tokens: &query_image.tokens,
        txt_tokens: &caption.tokens,
    })?;
    let target = model.embed_catalog_traced(&target_image.pooled, &target_image.tokens)?;
    Ok(ExampleForward {
        query_image,
        caption,
        query,
        target_image,
        target,
    })
}

fn check_batch(batch: &[&TrainingExample]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Data(format!("batch size must be at least 2, got {}", batch.len())));
    }
    let mut seen = HashSet::new();
    for ex in batch {
        if !seen.insert(ex.target_id.as_str()) {
            return Err(Error::Data(format!(
                "batch repeats target {}; it would be its own false negative",
                ex.target_id
            )));
        }
    }
    Ok(())
}

/// Batch-wise softmax cross-entropy of a batch, without gradients.
pub fn batch_loss<F: Real, B: Backbone<F> + ?Sized>(
    model: &FusionModel<F>,
    batch: &[&TrainingExample],
    backbone: &B,
) -> Result<F> {
    check_batch(batch)?;
    let fw: Vec<ExampleForward<F>> = batch
        .par_iter()
        .map(|ex| forward_example(model, backbone, ex))
        .collect::<Result<_>>()?;
    let q: Vec<Tensor<F>> = fw.iter().map(|f| f.query.output.clone()).collect();
    let t: Vec<Tensor<F>> = fw.iter().map(|f| f.target.output.clone()).collect();
    Ok(contrastive_loss(&q, &t, model.log_inv_temperature.value.data()[0])?.loss)
}

/// Batch loss with gradients for the fusion model and the backbone's trainable
/// parameters.
pub fn batch_gradients<F: Real, B: Backbone<F> + ?Sized>(
    model: &FusionModel<F>,
    batch: &[&TrainingExample],
    backbone: &B,
) -> Result<BatchOutcome<F>> {
    check_batch(batch)?;
    let fw: Vec<ExampleForward<F>> = batch
        .par_iter()
        .map(|ex| forward_example(model, backbone, ex))
        .collect::<Result<_>>()?;
    let q: Vec<Tensor<F>> = fw.iter().map(|f| f.query.output.clone()).collect();
    let t: Vec<Tensor<F>> = fw.iter().map(|f| f.target.output.clone()).collect();
    let loss = contrastive_loss(&q, &t, model.log_inv_temperature.value.data()[0])?;

    let shapes = backbone.param_shapes();
    let train_backbone = !shapes.is_empty();
    let zero_backbone = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();

    let group_grads = |start: usize| -> Result<(ModelGrads<F>, Vec<Tensor<F>>)> {
        let mut mg = model.zero_grads();
        let mut bg = zero_backbone();
        for i in start..(start + GROUP).min(fw.len()) {
            let f = &fw[i];
            let input = f.input();
            let g = model.fuse_backward(&input, &f.query, &loss.g_queries[i], &mut mg)?;
            if train_backbone {
                backbone.image_backward(&f.query_image, &g.img_pooled, &g.img_tokens, &mut bg)?;
                backbone.text_backward(&f.caption, &g.txt_pooled, &g.txt_tokens, &mut bg)?;
            }
            let (gp, gt) = model.catalog_backward(
                &f.target_image.pooled,
                &f.target_image.tokens,
                &f.target,
                &loss.g_targets[i],
                &mut mg,
            )?;
            if train_backbone {
                backbone.image_backward(&f.target_image, &gp, &gt, &mut bg)?;
            }
        }
        Ok((mg, bg))
    };

    let starts: Vec<usize> = (0..fw.len()).step_by(GROUP).collect();
    let mut model_grads = model.zero_grads();
    let mut backbone_grads = zero_backbone();
    // Waves bound memory to one group result per thread.
    for wave in starts.chunks(rayon::current_num_threads().max(1)) {
        let parts: Vec<_> = wave.par_iter().map(|&s| group_grads(s)).collect::<Result<_>>()?;
        for (mg, bg) in parts {
            model_grads.add_assign(&mg)?;
            for (acc, g) in backbone_grads.iter_mut().zip(&bg) {
                acc.add_assign(g)?;
            }
        }
    }
    model_grads.log_inv_temperature.data_mut()[0] += loss.g_log_inv_temperature;

    Ok(BatchOutcome {
        loss: loss.loss,
        tau: loss.tau,
        model: model_grads,
        backbone: backbone_grads,
    })
}

struct Optimizer<F: Real> {
    model: Vec<AdamState<F>>,
    backbone: Vec<AdamState<F>>,
}

fn set_multipliers<F: Real, B: Backbone<F> + ?Sized>(
    model: &mut FusionModel<F>,
    backbone: &mut B,
    config: &TrainConfig,
) -> Result<()> {
    let mut params = model.params_mut();
    let tau = params.pop().expect("temperature is always trainable");
    tau.set_lr_multiplier(1.0)?;
    for p in params {
        p.set_lr_multiplier(config.fusion_lr_multiplier)?;
    }
    for p in backbone.params_mut() {
        p.set_lr_multiplier(config.backbone_lr_multiplier)?;
    }
    Ok(())
}

fn apply_step<F: Real, B: Backbone<F> + ?Sized>(
    model: &mut FusionModel<F>,
    backbone: &mut B,
    outcome: &BatchOutcome<F>,
    opt: &mut Optimizer<F>,
    lr: f64,
) -> Result<()> {
    for ((p, g), s) in model.params_mut().into_iter().zip(outcome.model.as_vec()).zip(&mut opt.model) {
        p.grad = g.clone();
        adam_step(p, s, lr)?;
    }
    for ((p, g), s) in backbone.params_mut().into_iter().zip(&outcome.backbone).zip(&mut opt.backbone) {
        p.grad = g.clone();
        adam_step(p, s, lr)?;
    }
    // Keep the log inverse temperature inside the clamp range so it never stalls
    // where its gradient is zero.
    let lt = &mut model.log_inv_temperature.value.data_mut()[0];
    *lt = F::lit(lt.as_f64().clamp(TAU_MIN.ln(), TAU_MAX.ln()));
    Ok(())
}

/// Trains `model` (and the backbone's trainable parameters) in place.
///
/// Optimizer state starts fresh on every call, so a run resumed from a
/// checkpoint between calls matches one that never stopped.
pub fn train<F: Real, B: Backbone<F> + ?Sized>(
    model: &mut FusionModel<F>,
    backbone: &mut B,
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    let started = Instant::now();
    let epochs = config.epochs();
    let mut log = TrainLog::default();
    if epochs == 0 {
        return Ok(log);
    }
    set_multipliers(model, backbone, config)?;
    let mut opt = Optimizer {
        model: model.params_mut().iter().map(|p| AdamState::for_param(p)).collect(),
        backbone: backbone.params_mut().iter().map(|p| AdamState::for_param(p)).collect(),
    };

    let mut step = 0;
    for epoch in 0..epochs {
        let lr = lr_schedule(config, epoch);
        log.epoch_lrs.push(lr);
        let examples = data.epoch(config.seed, epoch)?;
        let batches = make_batches(&examples, config.batch_size, derive_seed(config.seed, &format!("epoch:{epoch}")))?;
        for batch in &batches {
            let refs: Vec<&TrainingExample> = batch.iter().map(|&i| &examples[i]).collect();
            let outcome = batch_gradients(model, &refs, backbone).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step} (epoch {epoch}): {msg}")),
                other => other,
            })?;
            if !outcome.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} (epoch {epoch}, tau {})",
                    outcome.tau
                )));
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: outcome.loss.as_f64(),
                tau: outcome.tau.as_f64(),
            });
            apply_step(model, backbone, &outcome, &mut opt, lr)?;
            step += 1;
        }
        log::info!(
            "epoch {epoch}: lr {lr:.3e}, mean loss {:.4}, tau {:.2}",
            log.tail_mean(batches.len()).unwrap_or(f64::NAN),
            model.tau().as_f64()
        );
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Runs stages back to back on the same model, e.g. weakly supervised data first
/// and human captions second.
pub fn train_sequential<F: Real, B: Backbone<F> + ?Sized>(
    model: &mut FusionModel<F>,
    backbone: &mut B,
    stages: &[(TrainingData<'_>, TrainConfig)],
) -> Result<Vec<TrainLog>> {
    stages.iter().map(|(data, config)| train(model, backbone, data, config)).collect()
}
