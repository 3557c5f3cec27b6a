use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::block::{AttentionBlock, BlockConfig, BlockGrads, BlockTensors, BLOCK_TENSOR_NAMES};
use super::strategy::{Composition, FusionInput, FusionRegistry, FusionStrategy, InputGrads};
use crate::error::{Error, Result};
use crate::numerics::bundle::TensorBundle;
use crate::numerics::{l2_normalize, l2_normalize_backward, ParamTensor, Real, Tensor};

pub const TAU_MIN: f64 = 1.0;
pub const TAU_MAX: f64 = 100.0;
pub const MODEL_BUNDLE_KIND: &str = "fusion_model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: String,
    pub alpha: f64,
    pub block: BlockConfig,
    pub init_inv_temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: "raf".into(),
            alpha: 0.01,
            block: BlockConfig::default(),
            init_inv_temperature: 14.3,
        }
    }
}

/// Gradients for every trainable tensor of a [`FusionModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<F: Real> {
    pub block: Option<BlockGrads<F>>,
    pub log_inv_temperature: Tensor<F>,
}

impl<F: Real> ModelGrads<F> {
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if let (Some(a), Some(b)) = (&mut self.block, &other.block) {
            a.add_assign(b)?;
        }
        self.log_inv_temperature.add_assign(&other.log_inv_temperature)
    }

    /// Ordered like [`FusionModel::params_mut`].
    pub fn as_vec(&self) -> Vec<&Tensor<F>> {
        let mut out = self.block.as_ref().map(|b| b.as_vec()).unwrap_or_default();
        out.push(&self.log_inv_temperature);
        out
    }
}

/// Forward intermediates of one fused embedding.
#[derive(Clone, Debug)]
pub struct FuseTrace<F: Real> {
    pub composition: Composition<F>,
    pub output: Tensor<F>,
    catalog: bool,
}

#[derive(Clone, Debug)]
pub struct FusionModel<F: Real = f32> {
    strategy: Arc<dyn FusionStrategy<F>>,
    alpha: f64,
    pub block: Option<AttentionBlock<F>>,
    pub log_inv_temperature: ParamTensor<F>,
    dim: usize,
    config: FusionConfig,
}

impl<F: Real> PartialEq for FusionModel<F> {
    fn eq(&self, other: &Self) -> bool {
        self.strategy.name() == other.strategy.name()
            && self.alpha == other.alpha
            && self.block == other.block
            && self.log_inv_temperature == other.log_inv_temperature
            && self.dim == other.dim
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

impl<F: Real> FusionModel<F> {
    pub fn new(config: &FusionConfig, dim: usize, seed: u64) -> Result<Self> {
        Self::with_registry(config, dim, seed, &FusionRegistry::with_builtins())
    }

    pub fn with_registry(config: &FusionConfig, dim: usize, seed: u64, registry: &FusionRegistry<F>) -> Result<Self> {
        check_alpha(config.alpha)?;
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let tau0 = config.init_inv_temperature;
        if !(TAU_MIN..=TAU_MAX).contains(&tau0) {
            return Err(Error::Config(format!(
                "initial inverse temperature {tau0} outside [{TAU_MIN}, {TAU_MAX}]"
            )));
        }
        let strategy = registry.get(&config.mode)?;
        let block = if strategy.uses_block() {
            let mut rng = crate::rng::stream(seed, "init");
            Some(AttentionBlock::init(dim, &config.block, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            strategy,
            alpha: config.alpha,
            block,
            log_inv_temperature: ParamTensor::new(Tensor::vector(vec![F::lit(tau0.ln())])),
            dim,
            config: config.clone(),
        })
    }

    pub fn mode(&self) -> &'static str {
        self.strategy.name()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        self.config.alpha = alpha;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Same parameters composed by another registered strategy. A block is created
    /// (from `seed`) if the new strategy needs one and the model has none.
    pub fn with_mode(&self, mode: &str, seed: u64) -> Result<Self> {
        let strategy = FusionRegistry::with_builtins().get(mode)?;
        let mut out = self.clone();
        if strategy.uses_block() && out.block.is_none() {
            let mut rng = crate::rng::stream(seed, "init");
            out.block = Some(AttentionBlock::init(self.dim, &self.config.block, &mut rng)?);
        }
        out.config.mode = strategy.name().to_string();
        out.strategy = strategy;
        Ok(out)
    }

    fn raw_log_tau(&self) -> f64 {
        self.log_inv_temperature.value.data()[0].as_f64()
    }

    /// `clamp(exp(log_inv_temperature), 1, 100)`
    pub fn tau(&self) -> F {
        F::lit(self.raw_log_tau().exp().clamp(TAU_MIN, TAU_MAX))
    }

    /// True when the clamp is active, so the temperature receives no gradient.
    pub fn tau_is_clamped(&self) -> bool {
        let t = self.raw_log_tau().exp();
        !(TAU_MIN..=TAU_MAX).contains(&t)
    }

    fn check_input(&self, input: &FusionInput<'_, F>) -> Result<()> {
        let d = self.dim;
        let ok = input.img_pooled.shape() == [d]
            && input.txt_pooled.shape() == [d]
            && input.img_tokens.rank() == 2
            && input.img_tokens.cols() == d
            && input.txt_tokens.rank() == 2
            && input.txt_tokens.cols() == d;
        if !ok {
            return Err(Error::Dimension(format!(
                "fusion inputs {:?}, {:?}, {:?}, {:?} do not match dim {d}",
                input.img_pooled.shape(),
                input.txt_pooled.shape(),
                input.img_tokens.shape(),
                input.txt_tokens.shape()
            )));
        }
        Ok(())
    }

    pub fn fuse_traced(&self, input: &FusionInput<'_, F>) -> Result<FuseTrace<F>> {
        self.check_input(input)?;
        let composition = self
            .strategy
            .compose(input, self.block.as_ref(), F::lit(self.alpha))?;
        let output = l2_normalize(&composition.raw)?;
        Ok(FuseTrace {
            composition,
            output,
            catalog: false,
        })
    }

    /// Unit-norm composed query embedding.
    pub fn fuse(&self, input: &FusionInput<'_, F>) -> Result<Tensor<F>> {
        Ok(self.fuse_traced(input)?.output)
    }

    pub fn embed_catalog_traced(&self, img_pooled: &Tensor<F>, img_tokens: &Tensor<F>) -> Result<FuseTrace<F>> {
        let zero = Tensor::zeros(&[self.dim]);
        let empty = Tensor::zeros(&[0, self.dim]);
        let input = FusionInput {
            img_pooled,
            txt_pooled: &zero,
            img_tokens,
            txt_tokens: &empty,
        };
        self.check_input(&input)?;
        let composition = if self.strategy.catalog_uses_query_path() {
            self.strategy
                .compose(&input, self.block.as_ref(), F::lit(self.alpha))?
        } else {
            Composition {
                raw: img_pooled.clone(),
                block: None,
            }
        };
        let output = l2_normalize(&composition.raw)?;
        Ok(FuseTrace {
            composition,
            output,
            catalog: true,
        })
    }

    /// Catalog embedding: the same composition with no caption.
    pub fn embed_catalog_item(&self, img_pooled: &Tensor<F>, img_tokens: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.embed_catalog_traced(img_pooled, img_tokens)?.output)
    }

    pub fn zero_grads(&self) -> ModelGrads<F> {
        ModelGrads {
            block: self.block.as_ref().map(BlockGrads::zeros_for),
            log_inv_temperature: Tensor::zeros(&[1]),
        }
    }

    /// Backward from the gradient on a fused output to the inputs, accumulating
    /// parameter gradients into `grads`. For catalog traces `input` must be the
    /// text-free input the trace was built from.
    pub fn fuse_backward(
        &self,
        input: &FusionInput<'_, F>,
        trace: &FuseTrace<F>,
        g_out: &Tensor<F>,
        grads: &mut ModelGrads<F>,
    ) -> Result<InputGrads<F>> {
        let g_raw = l2_normalize_backward(&trace.composition.raw, &trace.output, g_out);
        if trace.catalog && !self.strategy.catalog_uses_query_path() {
            let mut out = InputGrads::zeros(input);
            out.img_pooled = g_raw;
            return Ok(out);
        }
        self.strategy.backward(
            input,
            self.block.as_ref(),
            F::lit(self.alpha),
            &trace.composition,
            &g_raw,
            grads.block.as_mut(),
        )
    }

    /// Backward for a catalog embedding; returns `(d img_pooled, d img_tokens)`.
    pub fn catalog_backward(
        &self,
        img_pooled: &Tensor<F>,
        img_tokens: &Tensor<F>,
        trace: &FuseTrace<F>,
        g_out: &Tensor<F>,
        grads: &mut ModelGrads<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let zero = Tensor::zeros(&[self.dim]);
        let empty = Tensor::zeros(&[0, self.dim]);
        let input = FusionInput {
            img_pooled,
            txt_pooled: &zero,
            img_tokens,
            txt_tokens: &empty,
        };
        let g = self.fuse_backward(&input, trace, g_out, grads)?;
        Ok((g.img_pooled, g.img_tokens))
    }

    /// Trainable tensors: block parameters (if any), then the log inverse temperature.
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<F>> {
        let mut out = match &mut self.block {
            Some(b) => b.params.as_vec_mut(),
            None => Vec::new(),
        };
        out.push(&mut self.log_inv_temperature);
        out
    }

    pub fn param_count(&self) -> usize {
        self.block
            .as_ref()
            .map(|b| b.params.as_vec().iter().map(|p| p.value.len()).sum())
            .unwrap_or(0)
            + 1
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let meta = serde_json::json!({
            "mode": self.mode(),
            "alpha": self.alpha,
            "dim": self.dim,
            "heads": self.block.as_ref().map(|b| b.heads()),
            "ffn_hidden": self.block.as_ref().map(|b| b.ffn_hidden()),
            "ln_eps": self.block.as_ref().map(|b| b.ln_eps()),
            "config": self.config,
        });
        let mut b = TensorBundle::new(MODEL_BUNDLE_KIND, meta);
        b.push("log_inv_temperature", self.log_inv_temperature.value.cast());
        if let Some(block) = &self.block {
            for (name, p) in BLOCK_TENSOR_NAMES.iter().zip(block.params.as_vec()) {
                b.push(format!("block.{name}"), p.value.cast());
            }
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        Self::from_bundle_with(bundle, &FusionRegistry::with_builtins())
    }

    pub fn from_bundle_with(bundle: &TensorBundle, registry: &FusionRegistry<F>) -> Result<Self> {
        if bundle.kind != MODEL_BUNDLE_KIND {
            return Err(Error::Data(format!("bundle kind {} is not a fusion model", bundle.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            mode: String,
            alpha: f64,
            dim: usize,
            heads: Option<usize>,
            ln_eps: Option<f64>,
            config: FusionConfig,
        }
        let m: Meta = serde_json::from_value(bundle.meta.clone())?;
        check_alpha(m.alpha)?;
        let strategy = registry.get(&m.mode)?;
        let log_tau = bundle.get("log_inv_temperature")?.cast::<F>();
        if log_tau.shape() != [1] {
            return Err(Error::Data("log_inv_temperature must hold one value".into()));
        }
        log_tau.ensure_finite("log_inv_temperature")?;
        let has_block = bundle.tensors.iter().any(|(n, _)| n.starts_with("block."));
        let block = if has_block {
            let tensors = BLOCK_TENSOR_NAMES
                .iter()
                .map(|n| Ok(bundle.get(&format!("block.{n}"))?.cast::<F>()))
                .collect::<Result<Vec<_>>>()?;
            let heads = m.heads.ok_or_else(|| Error::Data("block without head count".into()))?;
            let eps = m.ln_eps.unwrap_or(m.config.block.ln_eps);
            let block = AttentionBlock::from_tensors(BlockTensors::from_vec(tensors)?, heads, eps)?;
            if block.dim() != m.dim {
                return Err(Error::Data(format!("block dim {} differs from model dim {}", block.dim(), m.dim)));
            }
            Some(block)
        } else {
            None
        };
        if strategy.uses_block() && block.is_none() {
            return Err(Error::Data(format!("mode {} needs block tensors", m.mode)));
        }
        let mut config = m.config;
        config.mode = strategy.name().to_string();
        config.alpha = m.alpha;
        Ok(Self {
            strategy,
            alpha: m.alpha,
            block,
            log_inv_temperature: ParamTensor::new(log_tau),
            dim: m.dim,
            config,
        })
    }
}

/// Dot-product scores of a query against catalog embeddings. All inputs must be
/// unit norm to within 1e-3.
pub fn score<F: Real>(query: &Tensor<F>, catalog: &[Tensor<F>]) -> Result<Vec<F>> {
    let check = |t: &Tensor<F>, what: &str| -> Result<()> {
        let n = t.norm().as_f64();
        if !((n - 1.0).abs() <= 1e-3) {
            return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
        }
        Ok(())
    };
    check(query, "query embedding")?;
    catalog
        .iter()
        .enumerate()
        .map(|(i, c)| {
            check(c, &format!("catalog embedding {i}"))?;
            query.dot(c)
        })
        .collect()
}
