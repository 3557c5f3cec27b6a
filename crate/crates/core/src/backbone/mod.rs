//! Pooled embeddings and token sequences for images and captions, from either
//! precomputed feature stores or the synthetic dual encoder.

pub mod encoder;
pub mod store;
pub mod world;

pub use encoder::{EncoderConfig, Encoding, SyntheticEncoder};
pub use store::{FeatureStore, Modality, StoreManifest};
pub use world::{default_schema, SyntheticWorld, WorldConfig, WorldItem};

use crate::error::{Error, Result};
use crate::numerics::{ParamTensor, Real, Tensor};
use crate::weaksup::{parse_caption, CaptionTemplates, Change};

/// Source of image and caption encodings for training and retrieval.
pub trait Backbone<F: Real>: Send + Sync {
    fn dim(&self) -> usize;

    fn image_ids(&self) -> Vec<String>;

    fn encode_image(&self, id: &str) -> Result<Encoding<F>>;

    /// `change` is the caption's meaning when the caller knows it. An empty caption
    /// without a change encodes to the zero vector with no tokens.
    fn encode_text(&self, caption: &str, change: Option<&Change>) -> Result<Encoding<F>>;

    /// Trainable backbone parameters, in a fixed order.
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<F>> {
        Vec::new()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }

    /// Accumulates parameter gradients (ordered as [`Backbone::params_mut`]).
    fn image_backward(
        &self,
        _enc: &Encoding<F>,
        _g_pooled: &Tensor<F>,
        _g_tokens: &Tensor<F>,
        _grads: &mut [Tensor<F>],
    ) -> Result<()> {
        Ok(())
    }

    fn text_backward(
        &self,
        _enc: &Encoding<F>,
        _g_pooled: &Tensor<F>,
        _g_tokens: &Tensor<F>,
        _grads: &mut [Tensor<F>],
    ) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBackbone<F: Real = f32> {
    pub world: SyntheticWorld,
    pub encoder: SyntheticEncoder<F>,
    pub train_image: bool,
    pub train_text: bool,
    templates: CaptionTemplates,
}

impl<F: Real> SyntheticBackbone<F> {
    pub fn new(world: SyntheticWorld, encoder: SyntheticEncoder<F>) -> Result<Self> {
        if world.concept_dim() != encoder.concept_dim() {
            return Err(Error::Config(format!(
                "world concept dim {} differs from encoder concept dim {}",
                world.concept_dim(),
                encoder.concept_dim()
            )));
        }
        Ok(Self {
            world,
            encoder,
            train_image: false,
            train_text: false,
            templates: CaptionTemplates::with_paraphrases(),
        })
    }

    pub fn with_training(mut self, image: bool, text: bool) -> Self {
        self.train_image = image;
        self.train_text = text;
        self
    }

    /// Same encoder over a different set of items.
    pub fn with_world(&self, world: SyntheticWorld) -> Result<Self> {
        let mut out = Self::new(world, self.encoder.clone())?;
        out.train_image = self.train_image;
        out.train_text = self.train_text;
        Ok(out)
    }
}

impl<F: Real> Backbone<F> for SyntheticBackbone<F> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn image_ids(&self) -> Vec<String> {
        self.world.ids()
    }

    fn encode_image(&self, id: &str) -> Result<Encoding<F>> {
        self.encoder.encode_image(&self.world, id)
    }

    fn encode_text(&self, caption: &str, change: Option<&Change>) -> Result<Encoding<F>> {
        match change {
            Some(c) => self.encoder.encode_text(&self.world, caption, Some(c)),
            None if caption.trim().is_empty() => Ok(Encoding::empty(self.dim())),
            None => {
                let parsed = parse_caption(caption, self.world.schema(), &self.templates)?;
                self.encoder.encode_text(&self.world, caption, Some(&parsed))
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<F>> {
        let mut out = Vec::new();
        if self.train_image {
            out.push(&mut self.encoder.w_img);
        }
        if self.train_text {
            out.push(&mut self.encoder.w_txt);
        }
        out
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if self.train_image {
            out.push(self.encoder.w_img.shape().to_vec());
        }
        if self.train_text {
            out.push(self.encoder.w_txt.shape().to_vec());
        }
        out
    }

    fn image_backward(
        &self,
        enc: &Encoding<F>,
        g_pooled: &Tensor<F>,
        g_tokens: &Tensor<F>,
        grads: &mut [Tensor<F>],
    ) -> Result<()> {
        if self.train_image {
            self.encoder.image_backward(enc, g_pooled, g_tokens, &mut grads[0])?;
        }
        Ok(())
    }

    fn text_backward(
        &self,
        enc: &Encoding<F>,
        g_pooled: &Tensor<F>,
        g_tokens: &Tensor<F>,
        grads: &mut [Tensor<F>],
    ) -> Result<()> {
        if self.train_text {
            let slot = usize::from(self.train_image);
            self.encoder.text_backward(enc, g_pooled, g_tokens, &mut grads[slot])?;
        }
        Ok(())
    }
}

/// Frozen encodings read from feature stores; captions are looked up by text.
#[derive(Clone, Debug)]
pub struct StoreBackbone {
    pub images: FeatureStore,
    pub texts: Option<FeatureStore>,
}

impl StoreBackbone {
    pub fn new(images: FeatureStore, texts: Option<FeatureStore>) -> Result<Self> {
        if images.modality() != Modality::Image {
            return Err(Error::Config("image store has text modality".into()));
        }
        if let Some(t) = &texts {
            if t.modality() != Modality::Text {
                return Err(Error::Config("text store has image modality".into()));
            }
            if t.dim() != images.dim() {
                return Err(Error::Config(format!(
                    "text store dim {} differs from image store dim {}",
                    t.dim(),
                    images.dim()
                )));
            }
        }
        Ok(Self { images, texts })
    }

    fn encoding<F: Real>(store: &FeatureStore, id: &str) -> Result<Encoding<F>> {
        let pooled = store.pooled(id)?.cast();
        let tokens = match store.tokens(id)? {
            Some(t) => t.cast(),
            None => Tensor::zeros(&[0, store.dim()]),
        };
        Ok(Encoding::new(pooled, tokens))
    }
}

impl<F: Real> Backbone<F> for StoreBackbone {
    fn dim(&self) -> usize {
        self.images.dim()
    }

    fn image_ids(&self) -> Vec<String> {
        self.images.ids().to_vec()
    }

    fn encode_image(&self, id: &str) -> Result<Encoding<F>> {
        Self::encoding(&self.images, id)
    }

    fn encode_text(&self, caption: &str, _change: Option<&Change>) -> Result<Encoding<F>> {
        if caption.trim().is_empty() {
            return Ok(Encoding::empty(self.images.dim()));
        }
        let store = self
            .texts
            .as_ref()
            .ok_or_else(|| Error::Config("no text feature store configured".into()))?;
        Self::encoding(store, caption)
    }
}
