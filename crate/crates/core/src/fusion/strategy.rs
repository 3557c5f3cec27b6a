//! Composition strategies and the registry that selects them by name.
//!
//! A strategy produces the raw (unnormalized) composed vector from the pooled
//! embeddings and token sequences of an image and a caption, and backpropagates
//! through that composition. [`super::FusionModel`] normalizes once afterwards.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use super::block::{AttentionBlock, BlockCache, BlockGrads};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct FusionInput<'a, F: Real> {
    pub img_pooled: &'a Tensor<F>,
    pub txt_pooled: &'a Tensor<F>,
    pub img_tokens: &'a Tensor<F>,
    pub txt_tokens: &'a Tensor<F>,
}

/// Gradients with respect to each input of a composition.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrads<F: Real> {
    pub img_pooled: Tensor<F>,
    pub txt_pooled: Tensor<F>,
    pub img_tokens: Tensor<F>,
    pub txt_tokens: Tensor<F>,
}

impl<F: Real> InputGrads<F> {
    pub fn zeros(input: &FusionInput<'_, F>) -> Self {
        Self {
            img_pooled: Tensor::zeros_like(input.img_pooled),
            txt_pooled: Tensor::zeros_like(input.txt_pooled),
            img_tokens: Tensor::zeros_like(input.img_tokens),
            txt_tokens: Tensor::zeros_like(input.txt_tokens),
        }
    }
}

/// Intermediates of one attention-block pass over the concatenated sequence.
#[derive(Clone, Debug)]
pub struct BlockTrace<F: Real> {
    pub cache: BlockCache<F>,
    pub pooled: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct Composition<F: Real> {
    pub raw: Tensor<F>,
    pub block: Option<BlockTrace<F>>,
}

pub trait FusionStrategy<F: Real>: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn uses_block(&self) -> bool {
        false
    }

    fn compose(
        &self,
        input: &FusionInput<'_, F>,
        block: Option<&AttentionBlock<F>>,
        alpha: F,
    ) -> Result<Composition<F>>;

    /// Maps the gradient on the raw composition to input gradients, accumulating
    /// block parameter gradients into `grads` when the strategy uses the block.
    fn backward(
        &self,
        input: &FusionInput<'_, F>,
        block: Option<&AttentionBlock<F>>,
        alpha: F,
        comp: &Composition<F>,
        g_raw: &Tensor<F>,
        grads: Option<&mut BlockGrads<F>>,
    ) -> Result<InputGrads<F>>;

    /// Whether catalog items are embedded through the text-free query path. A
    /// strategy answering `false` embeds catalog items as the pooled image alone.
    fn catalog_uses_query_path(&self) -> bool {
        true
    }
}

fn require_block<F: Real>(block: Option<&AttentionBlock<F>>) -> Result<&AttentionBlock<F>> {
    block.ok_or_else(|| Error::Config("this fusion mode needs an attention block".into()))
}

fn has_text<F: Real>(input: &FusionInput<'_, F>) -> bool {
    input.txt_pooled.data().iter().any(|&x| x != F::zero()) || input.txt_tokens.rows() > 0
}

fn run_block<F: Real>(input: &FusionInput<'_, F>, block: &AttentionBlock<F>) -> Result<BlockTrace<F>> {
    if input.img_tokens.rows() == 0 {
        return Err(Error::Config("attention fusion needs the image token sequence".into()));
    }
    if input.txt_tokens.rows() == 0 && has_text(input) {
        return Err(Error::Config("attention fusion needs the caption token sequence".into()));
    }
    let seq = input.img_tokens.concat_rows(input.txt_tokens)?;
    let cache = block.forward(&seq)?;
    let pooled = block.pool(cache.output())?;
    Ok(BlockTrace { cache, pooled })
}

/// Backward through pool and block given the gradient on the pooled output.
fn block_backward<F: Real>(
    trace: &BlockTrace<F>,
    block: &AttentionBlock<F>,
    g_pooled: &Tensor<F>,
    grads: Option<&mut BlockGrads<F>>,
    out: &mut InputGrads<F>,
) -> Result<()> {
    let mut g_w_pool = Tensor::zeros_like(&block.params.w_pool.value);
    let g_seq = block.pool_backward(trace.cache.output(), g_pooled, &mut g_w_pool)?;
    let bw = block.backward(&trace.cache, &g_seq)?;
    let (g_img, g_txt) = bw.grad_input.split_rows(out.img_tokens.rows());
    out.img_tokens.add_assign(&g_img)?;
    out.txt_tokens.add_assign(&g_txt)?;
    if let Some(acc) = grads {
        acc.add_assign(&bw.grads)?;
        acc.w_pool.add_assign(&g_w_pool)?;
    }
    Ok(())
}

/// `img + txt`
#[derive(Debug, Default)]
pub struct VectorAddition;

impl<F: Real> FusionStrategy<F> for VectorAddition {
    fn name(&self) -> &'static str {
        "va"
    }

    fn compose(&self, input: &FusionInput<'_, F>, _: Option<&AttentionBlock<F>>, _: F) -> Result<Composition<F>> {
        Ok(Composition {
            raw: input.img_pooled.add(input.txt_pooled)?,
            block: None,
        })
    }

    fn backward(
        &self,
        input: &FusionInput<'_, F>,
        _: Option<&AttentionBlock<F>>,
        _: F,
        _: &Composition<F>,
        g_raw: &Tensor<F>,
        _: Option<&mut BlockGrads<F>>,
    ) -> Result<InputGrads<F>> {
        let mut out = InputGrads::zeros(input);
        out.img_pooled = g_raw.clone();
        out.txt_pooled = g_raw.clone();
        Ok(out)
    }
}

/// `pool(block(concat(img_tokens, txt_tokens)))`
#[derive(Debug, Default)]
pub struct AttentionFusion;

impl<F: Real> FusionStrategy<F> for AttentionFusion {
    fn name(&self) -> &'static str {
        "af"
    }

    fn uses_block(&self) -> bool {
        true
    }

    fn compose(&self, input: &FusionInput<'_, F>, block: Option<&AttentionBlock<F>>, _: F) -> Result<Composition<F>> {
        let trace = run_block(input, require_block(block)?)?;
        Ok(Composition {
            raw: trace.pooled.clone(),
            block: Some(trace),
        })
    }

    fn backward(
        &self,
        input: &FusionInput<'_, F>,
        block: Option<&AttentionBlock<F>>,
        _: F,
        comp: &Composition<F>,
        g_raw: &Tensor<F>,
        grads: Option<&mut BlockGrads<F>>,
    ) -> Result<InputGrads<F>> {
        let block = require_block(block)?;
        let trace = comp
            .block
            .as_ref()
            .ok_or_else(|| Error::Contract("composition lacks its block trace".into()))?;
        let mut out = InputGrads::zeros(input);
        block_backward(trace, block, g_raw, grads, &mut out)?;
        Ok(out)
    }
}

/// `img + txt + alpha * pool(block(concat(img_tokens, txt_tokens)))`. With
/// `alpha == 0` the block is skipped, so the result is bitwise vector addition.
#[derive(Debug, Default)]
pub struct ResidualAttentionFusion;

impl<F: Real> FusionStrategy<F> for ResidualAttentionFusion {
    fn name(&self) -> &'static str {
        "raf"
    }

    fn uses_block(&self) -> bool {
        true
    }

    fn compose(&self, input: &FusionInput<'_, F>, block: Option<&AttentionBlock<F>>, alpha: F) -> Result<Composition<F>> {
        let block = require_block(block)?;
        let mut raw = input.img_pooled.add(input.txt_pooled)?;
        if alpha == F::zero() {
            return Ok(Composition { raw, block: None });
        }
        let trace = run_block(input, block)?;
        raw.axpy(alpha, &trace.pooled)?;
        Ok(Composition {
            raw,
            block: Some(trace),
        })
    }

    fn backward(
        &self,
        input: &FusionInput<'_, F>,
        block: Option<&AttentionBlock<F>>,
        alpha: F,
        comp: &Composition<F>,
        g_raw: &Tensor<F>,
        grads: Option<&mut BlockGrads<F>>,
    ) -> Result<InputGrads<F>> {
        let block = require_block(block)?;
        let mut out = InputGrads::zeros(input);
        out.img_pooled = g_raw.clone();
        out.txt_pooled = g_raw.clone();
        if let Some(trace) = &comp.block {
            block_backward(trace, block, &g_raw.scale(alpha), grads, &mut out)?;
        }
        Ok(out)
    }
}

/// `img`, ignoring the caption.
#[derive(Debug, Default)]
pub struct ImageOnly;

impl<F: Real> FusionStrategy<F> for ImageOnly {
    fn name(&self) -> &'static str {
        "img_only"
    }

    fn compose(&self, input: &FusionInput<'_, F>, _: Option<&AttentionBlock<F>>, _: F) -> Result<Composition<F>> {
        Ok(Composition {
            raw: input.img_pooled.clone(),
            block: None,
        })
    }

    fn backward(
        &self,
        input: &FusionInput<'_, F>,
        _: Option<&AttentionBlock<F>>,
        _: F,
        _: &Composition<F>,
        g_raw: &Tensor<F>,
        _: Option<&mut BlockGrads<F>>,
    ) -> Result<InputGrads<F>> {
        let mut out = InputGrads::zeros(input);
        out.img_pooled = g_raw.clone();
        Ok(out)
    }
}

/// `txt` for queries; catalog items are still embedded from their images.
#[derive(Debug, Default)]
pub struct TextOnly;

impl<F: Real> FusionStrategy<F> for TextOnly {
    fn name(&self) -> &'static str {
        "txt_only"
    }

    fn compose(&self, input: &FusionInput<'_, F>, _: Option<&AttentionBlock<F>>, _: F) -> Result<Composition<F>> {
        Ok(Composition {
            raw: input.txt_pooled.clone(),
            block: None,
        })
    }

    fn backward(
        &self,
        input: &FusionInput<'_, F>,
        _: Option<&AttentionBlock<F>>,
        _: F,
        _: &Composition<F>,
        g_raw: &Tensor<F>,
        _: Option<&mut BlockGrads<F>>,
    ) -> Result<InputGrads<F>> {
        let mut out = InputGrads::zeros(input);
        out.txt_pooled = g_raw.clone();
        Ok(out)
    }

    fn catalog_uses_query_path(&self) -> bool {
        false
    }
}

/// Fusion strategies by name.
#[derive(Clone, Debug)]
pub struct FusionRegistry<F: Real> {
    strategies: BTreeMap<String, Arc<dyn FusionStrategy<F>>>,
}

/// Lowercase with `-` folded to `_`, so "IMG-ONLY" finds "img_only".
pub fn canonical_mode(name: &str) -> String {
    name.trim().to_lowercase().replace('-', "_")
}

impl<F: Real> FusionRegistry<F> {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        let builtins: [Arc<dyn FusionStrategy<F>>; 5] = [
            Arc::new(VectorAddition),
            Arc::new(AttentionFusion),
            Arc::new(ResidualAttentionFusion),
            Arc::new(ImageOnly),
            Arc::new(TextOnly),
        ];
        for s in builtins {
            r.register(s).expect("builtin names are distinct");
        }
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn FusionStrategy<F>>) -> Result<()> {
        let name = canonical_mode(strategy.name());
        if self.strategies.contains_key(&name) {
            return Err(Error::Config(format!("fusion mode {name} registered twice")));
        }
        self.strategies.insert(name, strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FusionStrategy<F>>> {
        self.strategies.get(&canonical_mode(name)).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown fusion mode {name} (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.strategies.keys().cloned().collect()
    }
}
