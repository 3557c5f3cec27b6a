//! A synthetic aligned dual encoder: image and text concepts are projected into a
//! shared `d`-dimensional space by `W_img` and `W_txt`, plus seeded noise.
//!
//! Alignment holds when both projections coincide and the text channels are not
//! permuted; the scramble and mismatch disruptions break exactly one of these.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::world::SyntheticWorld;
use crate::error::{Error, Result};
use crate::numerics::bundle::TensorBundle;
use crate::numerics::{l2_normalize, l2_normalize_backward, ParamTensor, Real, Tensor};
use crate::rng::stream;
use crate::weaksup::Change;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub concept_dim: usize,
    pub token_count_img: usize,
    pub token_count_txt: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            concept_dim: 32,
            token_count_img: 50,
            token_count_txt: 8,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Output of one encoder call. The cache keeps what the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<F: Real = f32> {
    pub pooled: Tensor<F>,
    pub tokens: Tensor<F>,
    pub(crate) cache: Option<EncodingCache<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncodingCache<F: Real> {
    /// Pooled vector before normalization.
    pre: Tensor<F>,
    concept: Vec<F>,
}

impl<F: Real> Encoding<F> {
    pub fn new(pooled: Tensor<F>, tokens: Tensor<F>) -> Self {
        Self { pooled, tokens, cache: None }
    }

    /// The empty caption: zero pooled vector and no tokens.
    pub fn empty(dim: usize) -> Self {
        Self::new(Tensor::zeros(&[dim]), Tensor::zeros(&[0, dim]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEncoder<F: Real = f32> {
    pub w_img: ParamTensor<F>,
    pub w_txt: ParamTensor<F>,
    token_count_img: usize,
    token_count_txt: usize,
    noise_sigma: f64,
    channel_perm: Option<Vec<usize>>,
    seed: u64,
}

fn gaussian_matrix<F: Real>(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor<F> {
    let mut rng = stream(seed, name);
    let data = (0..rows * cols)
        .map(|_| F::lit(StandardNormal.sample(&mut rng)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// `W c` for a `d x k` matrix and a length-`k` concept.
fn project<F: Real>(w: &Tensor<F>, c: &[F]) -> Vec<F> {
    (0..w.rows()).map(|i| crate::numerics::tensor::dot(w.row(i), c)).collect()
}

impl<F: Real> SyntheticEncoder<F> {
    /// An aligned encoder: `W_txt == W_img`, no channel permutation.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.dim == 0 || config.concept_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if config.token_count_img == 0 || config.token_count_txt == 0 {
            return Err(Error::Config("token counts must be positive".into()));
        }
        if !(config.noise_sigma >= 0.0) || !config.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", config.noise_sigma)));
        }
        let w: Tensor<F> = gaussian_matrix(config.dim, config.concept_dim, config.seed, "w_img");
        Ok(Self {
            w_img: ParamTensor::new(w.clone()),
            w_txt: ParamTensor::new(w),
            token_count_img: config.token_count_img,
            token_count_txt: config.token_count_txt,
            noise_sigma: config.noise_sigma,
            channel_perm: None,
            seed: config.seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_img.value.rows()
    }

    pub fn concept_dim(&self) -> usize {
        self.w_img.value.cols()
    }

    pub fn token_count_img(&self) -> usize {
        self.token_count_img
    }

    pub fn token_count_txt(&self) -> usize {
        self.token_count_txt
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channel_perm(&self) -> Option<&[usize]> {
        self.channel_perm.as_deref()
    }

    pub fn is_aligned(&self) -> bool {
        self.channel_perm.is_none() && self.w_img.value == self.w_txt.value
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {sigma}")));
        }
        self.noise_sigma = sigma;
        Ok(self)
    }

    /// Sets the text channel permutation (`out[i] = in[perm[i]]`). The identity
    /// permutation leaves the encoder unchanged.
    pub fn with_channel_perm(mut self, perm: Vec<usize>) -> Result<Self> {
        let d = self.dim();
        let mut seen = vec![false; d];
        if perm.len() != d || perm.iter().any(|&p| p >= d || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!("not a permutation of {d} channels")));
        }
        self.channel_perm = if perm.iter().enumerate().all(|(i, &p)| i == p) {
            None
        } else {
            Some(perm)
        };
        Ok(self)
    }

    /// Permutes the text channels by a fixed random permutation drawn from `perm_seed`.
    pub fn scramble_text_channels(self, perm_seed: u64) -> Result<Self> {
        let mut perm: Vec<usize> = (0..self.dim()).collect();
        perm.shuffle(&mut stream(perm_seed, "channel_perm"));
        self.with_channel_perm(perm)
    }

    /// Replaces `W_txt` with a projection drawn independently of `W_img`.
    pub fn mismatch_text_module(mut self, new_seed: u64) -> Self {
        let w = gaussian_matrix(self.dim(), self.concept_dim(), new_seed, "w_txt");
        self.w_txt = ParamTensor::new(w);
        self
    }

    fn noise_rows(&self, key: &str, rows: usize) -> Vec<Vec<F>> {
        let d = self.dim();
        let mut rng = stream(self.seed, key);
        (0..rows)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        F::lit(self.noise_sigma * z)
                    })
                    .collect()
            })
            .collect()
    }

    fn concept_of(values: Vec<f64>) -> Vec<F> {
        values.into_iter().map(F::lit).collect()
    }

    /// Pooled `normalize(W_img c + n_0)`; tokens are `L-1` noisy copies of
    /// `W_img c` followed by the pooled vector itself.
    pub fn encode_image(&self, world: &SyntheticWorld, item_id: &str) -> Result<Encoding<F>> {
        let c = Self::concept_of(world.item_concept(item_id)?);
        self.check_concept(&c)?;
        let d = self.dim();
        let base = project(&self.w_img.value, &c);
        let noise = self.noise_rows(&format!("image:{item_id}"), self.token_count_img);
        let pre: Vec<F> = base.iter().zip(&noise[0]).map(|(&b, &n)| b + n).collect();
        let pre = Tensor::vector(pre);
        let pooled = l2_normalize(&pre)?;
        let mut tokens = Vec::with_capacity(self.token_count_img * d);
        for n in &noise[1..] {
            tokens.extend(base.iter().zip(n).map(|(&b, &z)| b + z));
        }
        tokens.extend_from_slice(pooled.data());
        Ok(Encoding {
            tokens: Tensor::matrix(self.token_count_img, d, tokens)?,
            pooled,
            cache: Some(EncodingCache { pre, concept: c }),
        })
    }

    /// Text encoding of a caption whose meaning is `change`; the caption text only
    /// keys the noise. `None` is the empty caption.
    pub fn encode_text(
        &self,
        world: &SyntheticWorld,
        caption: &str,
        change: Option<&Change>,
    ) -> Result<Encoding<F>> {
        let Some(change) = change else {
            return Ok(Encoding::empty(self.dim()));
        };
        let c = Self::concept_of(world.caption_concept(change)?);
        self.check_concept(&c)?;
        let d = self.dim();
        let base = project(&self.w_txt.value, &c);
        let noise = self.noise_rows(&format!("text:{caption}"), self.token_count_txt + 1);
        let permute = |v: Vec<F>| match &self.channel_perm {
            Some(p) => p.iter().map(|&j| v[j]).collect(),
            None => v,
        };
        let pre = Tensor::vector(permute(base.iter().zip(&noise[0]).map(|(&b, &n)| b + n).collect()));
        let pooled = l2_normalize(&pre)?;
        let mut tokens = Vec::with_capacity(self.token_count_txt * d);
        for n in &noise[1..] {
            tokens.extend(permute(base.iter().zip(n).map(|(&b, &z)| b + z).collect()));
        }
        Ok(Encoding {
            tokens: Tensor::matrix(self.token_count_txt, d, tokens)?,
            pooled,
            cache: Some(EncodingCache { pre, concept: c }),
        })
    }

    fn check_concept(&self, c: &[F]) -> Result<()> {
        if c.len() != self.concept_dim() {
            return Err(Error::Dimension(format!(
                "world concept dim {} does not match encoder concept dim {}",
                c.len(),
                self.concept_dim()
            )));
        }
        Ok(())
    }

    fn check_grads(&self, enc: &Encoding<F>, g_pooled: &Tensor<F>, g_tokens: &Tensor<F>) -> Result<()> {
        if g_pooled.shape() != enc.pooled.shape() || g_tokens.shape() != enc.tokens.shape() {
            return Err(Error::Dimension(format!(
                "gradients {:?}/{:?} do not match encoding {:?}/{:?}",
                g_pooled.shape(),
                g_tokens.shape(),
                enc.pooled.shape(),
                enc.tokens.shape()
            )));
        }
        Ok(())
    }

    /// Accumulates `dL/dW_img` into `grad_w` given gradients on an image encoding.
    pub fn image_backward(
        &self,
        enc: &Encoding<F>,
        g_pooled: &Tensor<F>,
        g_tokens: &Tensor<F>,
        grad_w: &mut Tensor<F>,
    ) -> Result<()> {
        self.check_grads(enc, g_pooled, g_tokens)?;
        let Some(cache) = &enc.cache else { return Ok(()) };
        let l = enc.tokens.rows();
        let mut g_out = g_pooled.clone();
        for (g, &t) in g_out.data_mut().iter_mut().zip(g_tokens.row(l - 1)) {
            *g += t;
        }
        let mut g_base = l2_normalize_backward(&cache.pre, &enc.pooled, &g_out).into_data();
        for i in 0..l - 1 {
            for (g, &t) in g_base.iter_mut().zip(g_tokens.row(i)) {
                *g += t;
            }
        }
        outer_accumulate(grad_w, &g_base, &cache.concept)
    }

    /// Accumulates `dL/dW_txt` into `grad_w` given gradients on a text encoding.
    pub fn text_backward(
        &self,
        enc: &Encoding<F>,
        g_pooled: &Tensor<F>,
        g_tokens: &Tensor<F>,
        grad_w: &mut Tensor<F>,
    ) -> Result<()> {
        self.check_grads(enc, g_pooled, g_tokens)?;
        let Some(cache) = &enc.cache else { return Ok(()) };
        let mut g_perm = l2_normalize_backward(&cache.pre, &enc.pooled, g_pooled).into_data();
        for i in 0..enc.tokens.rows() {
            for (g, &t) in g_perm.iter_mut().zip(g_tokens.row(i)) {
                *g += t;
            }
        }
        let g_base = match &self.channel_perm {
            Some(p) => {
                let mut out = vec![F::zero(); g_perm.len()];
                for (i, &j) in p.iter().enumerate() {
                    out[j] += g_perm[i];
                }
                out
            }
            None => g_perm,
        };
        outer_accumulate(grad_w, &g_base, &cache.concept)
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let meta = serde_json::json!({
            "token_count_img": self.token_count_img,
            "token_count_txt": self.token_count_txt,
            "noise_sigma": self.noise_sigma,
            "channel_perm": self.channel_perm,
            "seed": self.seed,
        });
        let mut b = TensorBundle::new("synthetic_encoder", meta);
        b.push("w_img", self.w_img.value.cast());
        b.push("w_txt", self.w_txt.value.cast());
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        if bundle.kind != "synthetic_encoder" {
            return Err(Error::Data(format!("bundle kind {} is not an encoder", bundle.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            token_count_img: usize,
            token_count_txt: usize,
            noise_sigma: f64,
            channel_perm: Option<Vec<usize>>,
            seed: u64,
        }
        let m: Meta = serde_json::from_value(bundle.meta.clone())?;
        let w_img = bundle.get("w_img")?.cast::<F>();
        let w_txt = bundle.get("w_txt")?.cast::<F>();
        if w_img.rank() != 2 || w_img.shape() != w_txt.shape() {
            return Err(Error::Data("encoder projections must be equal-shaped matrices".into()));
        }
        let enc = Self {
            w_img: ParamTensor::new(w_img),
            w_txt: ParamTensor::new(w_txt),
            token_count_img: m.token_count_img,
            token_count_txt: m.token_count_txt,
            noise_sigma: m.noise_sigma,
            channel_perm: None,
            seed: m.seed,
        };
        match m.channel_perm {
            Some(p) => enc.with_channel_perm(p),
            None => Ok(enc),
        }
    }
}

fn outer_accumulate<F: Real>(grad_w: &mut Tensor<F>, g: &[F], c: &[F]) -> Result<()> {
    if grad_w.shape() != [g.len(), c.len()] {
        return Err(Error::Dimension(format!(
            "projection gradient has shape {:?}, expected [{}, {}]",
            grad_w.shape(),
            g.len(),
            c.len()
        )));
    }
    for (i, &gi) in g.iter().enumerate() {
        for (w, &cj) in grad_w.row_mut(i).iter_mut().zip(c) {
            *w += gi * cj;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::world::{WorldConfig, WorldItem};
    use crate::numerics::finite_difference_check;
    use crate::weaksup::Schema;
    use indexmap::IndexMap;

    fn world() -> SyntheticWorld {
        SyntheticWorld::generate(&WorldConfig { items: 16, ..Default::default() }).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn to64(t: &Tensor<f32>) -> Vec<f64> {
        t.data().iter().map(|&x| x as f64).collect()
    }

    #[test]
    fn zero_noise_pooled_is_normalized_projection() {
        let w = world();
        let enc = SyntheticEncoder::<f64>::new(&EncoderConfig::default())
            .unwrap()
            .with_noise_sigma(0.0)
            .unwrap();
        let id = &w.ids()[3];
        let e = enc.encode_image(&w, id).unwrap();
        let c = w.item_concept(id).unwrap();
        let expected = l2_normalize(&Tensor::vector(project(&enc.w_img.value, &c))).unwrap();
        assert_eq!(e.pooled, expected);
        assert_eq!(e.tokens.rows(), 50);
        assert_eq!(e.tokens.row(49), e.pooled.data());
    }

    #[test]
    fn aligned_projections_agree_exactly() {
        let w = world();
        let enc = SyntheticEncoder::<f32>::new(&EncoderConfig::default()).unwrap();
        assert!(enc.is_aligned());
        for id in w.ids() {
            let c: Vec<f32> = w.item_concept(&id).unwrap().into_iter().map(|x| x as f32).collect();
            let a = l2_normalize(&Tensor::vector(project(&enc.w_img.value, &c))).unwrap();
            let b = l2_normalize(&Tensor::vector(project(&enc.w_txt.value, &c))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn encodings_are_deterministic() {
        let w = world();
        let enc = SyntheticEncoder::<f32>::new(&EncoderConfig::default()).unwrap();
        let id = &w.ids()[0];
        assert_eq!(enc.encode_image(&w, id).unwrap(), enc.encode_image(&w, id).unwrap());
        let ch = Change::Add { group: "color".into(), value: "red".into() };
        assert_eq!(
            enc.encode_text(&w, "with red", Some(&ch)).unwrap(),
            enc.encode_text(&w, "with red", Some(&ch)).unwrap()
        );
    }

    #[test]
    fn one_attribute_difference_is_closer_than_all() {
        let schema = Schema::new(IndexMap::from([
            ("color".to_string(), vec!["red".to_string(), "black".to_string()]),
            ("sleeve".to_string(), vec!["long".to_string(), "short".to_string()]),
            ("fit".to_string(), vec!["slim".to_string(), "loose".to_string()]),
        ]))
        .unwrap();
        let cfg = EncoderConfig { noise_sigma: 0.0, ..Default::default() };
        for seed in 0..10 {
            let mut w = SyntheticWorld::with_schema(schema.clone(), 32, seed).unwrap();
            for (id, values) in [("a", vec![0, 0, 0]), ("b", vec![1, 0, 0]), ("c", vec![1, 1, 1])] {
                w.push(WorldItem { id: id.into(), values }).unwrap();
            }
            let enc = SyntheticEncoder::<f32>::new(&EncoderConfig { seed, ..cfg.clone() }).unwrap();
            let p = |id| to64(&enc.encode_image(&w, id).unwrap().pooled);
            let (a, b, c) = (p("a"), p("b"), p("c"));
            assert!(cosine(&a, &b) > cosine(&a, &c), "seed {seed}");
        }
    }

    fn two_item_world(seed: u64) -> SyntheticWorld {
        let mut w = SyntheticWorld::generate(&WorldConfig { items: 0, seed, ..Default::default() }).unwrap();
        w.push(WorldItem { id: "a".into(), values: vec![0; 8] }).unwrap();
        let mut v = vec![0; 8];
        v[0] = 1;
        w.push(WorldItem { id: "b".into(), values: v }).unwrap();
        w
    }

    fn va_prefers_b(enc: &SyntheticEncoder<f32>, w: &SyntheticWorld) -> bool {
        let ch = Change::Swap { group: "color".into(), from: "red".into(), to: "black".into() };
        let img_a = to64(&enc.encode_image(w, "a").unwrap().pooled);
        let img_b = to64(&enc.encode_image(w, "b").unwrap().pooled);
        let txt = to64(&enc.encode_text(w, "black not red", Some(&ch)).unwrap().pooled);
        let q: Vec<f64> = img_a.iter().zip(&txt).map(|(x, y)| x + y).collect();
        cosine(&q, &img_b) > cosine(&q, &img_a)
    }

    #[test]
    fn vector_addition_moves_towards_the_variant() {
        let cfg = EncoderConfig { noise_sigma: 0.0, ..Default::default() };
        for seed in 0..10 {
            let w = two_item_world(seed);
            let enc = SyntheticEncoder::new(&EncoderConfig { seed, ..cfg.clone() }).unwrap();
            assert!(va_prefers_b(&enc, &w), "seed {seed}");
        }
    }

    #[test]
    fn disrupted_alignment_breaks_vector_addition() {
        let cfg = EncoderConfig { noise_sigma: 0.0, ..Default::default() };
        let mut scramble_failed = false;
        let mut mismatch_failed = false;
        for seed in 0..20 {
            let w = two_item_world(seed);
            let enc = SyntheticEncoder::new(&EncoderConfig { seed, ..cfg.clone() }).unwrap();
            scramble_failed |= !va_prefers_b(&enc.clone().scramble_text_channels(seed + 100).unwrap(), &w);
            mismatch_failed |= !va_prefers_b(&enc.mismatch_text_module(seed + 100), &w);
        }
        assert!(scramble_failed && mismatch_failed);
    }

    #[test]
    fn empty_caption_is_zero() {
        let w = world();
        let enc = SyntheticEncoder::<f32>::new(&EncoderConfig::default()).unwrap();
        let e = enc.encode_text(&w, "", None).unwrap();
        assert!(e.pooled.data().iter().all(|&x| x == 0.0));
        assert_eq!(e.tokens.shape(), &[0, 64]);
    }

    #[test]
    fn scramble_is_seeded_and_identity_is_noop() {
        let enc = SyntheticEncoder::<f32>::new(&EncoderConfig::default()).unwrap();
        let a = enc.clone().scramble_text_channels(4).unwrap();
        let b = enc.clone().scramble_text_channels(4).unwrap();
        assert_eq!(a.channel_perm(), b.channel_perm());
        assert!(!a.is_aligned());
        assert_eq!(a.w_img, enc.w_img);
        let same = enc.clone().with_channel_perm((0..64).collect()).unwrap();
        assert_eq!(same, enc);
        let m1 = enc.clone().mismatch_text_module(9);
        let m2 = enc.clone().mismatch_text_module(9);
        assert_eq!(m1, m2);
        assert!(!m1.is_aligned());
        assert_eq!(m1.w_img, enc.w_img);
    }

    #[test]
    fn bundle_round_trip() {
        let enc = SyntheticEncoder::<f32>::new(&EncoderConfig::default())
            .unwrap()
            .scramble_text_channels(1)
            .unwrap()
            .mismatch_text_module(2);
        let back = SyntheticEncoder::<f32>::from_bundle(&enc.to_bundle()).unwrap();
        assert_eq!(back, enc);
    }

    /// Loss = <A, tokens> + <b, pooled> for fixed random A, b, as a function of W.
    fn check_backward(text: bool, scrambled: bool) -> f64 {
        let w = world();
        let cfg = EncoderConfig { dim: 8, concept_dim: 32, token_count_img: 4, token_count_txt: 3, ..Default::default() };
        let mut base = SyntheticEncoder::<f64>::new(&cfg).unwrap().mismatch_text_module(3);
        if scrambled {
            base = base.scramble_text_channels(5).unwrap();
        }
        let ch = Change::Swap { group: "color".into(), from: "red".into(), to: "black".into() };
        let probe = if text {
            base.encode_text(&w, "x", Some(&ch)).unwrap()
        } else {
            base.encode_image(&w, "item000").unwrap()
        };
        let a: Tensor<f64> = gaussian_matrix(probe.tokens.rows(), 8, 77, "a");
        let b: Tensor<f64> = gaussian_matrix(1, 8, 78, "b").reshape(vec![8]).unwrap();
        let x0 = if text { base.w_txt.value.clone() } else { base.w_img.value.clone() };
        finite_difference_check(
            |x| {
                let mut enc = base.clone();
                if text {
                    enc.w_txt.value = x.clone();
                } else {
                    enc.w_img.value = x.clone();
                }
                let e = if text {
                    enc.encode_text(&w, "x", Some(&ch)).unwrap()
                } else {
                    enc.encode_image(&w, "item000").unwrap()
                };
                let loss = e.tokens.dot(&a).unwrap() + e.pooled.dot(&b).unwrap();
                let mut g = Tensor::zeros_like(x);
                if text {
                    enc.text_backward(&e, &b, &a, &mut g).unwrap();
                } else {
                    enc.image_backward(&e, &b, &a, &mut g).unwrap();
                }
                (loss, g)
            },
            &x0,
            1e-5,
        )
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        assert!(check_backward(false, false) < 1e-6);
        assert!(check_backward(true, false) < 1e-6);
        assert!(check_backward(true, true) < 1e-6);
    }
}
