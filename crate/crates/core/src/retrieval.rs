//! Embedding catalogs and queries with a trained model and ranking by dot product.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::evaluation::{rank_by_score, QuerySpec, ScoreMatrix};
use crate::fusion::{score, FusionInput, FusionModel};
use crate::numerics::{Real, Tensor};
use crate::weaksup::Change;

/// Catalog embeddings for `ids`, in order.
pub fn embed_catalog<F: Real, B: Backbone<F> + ?Sized>(
    model: &FusionModel<F>,
    backbone: &B,
    ids: &[String],
) -> Result<Vec<Tensor<F>>> {
    ids.par_iter()
        .map(|id| {
            let e = backbone.encode_image(id)?;
            model.embed_catalog_item(&e.pooled, &e.tokens)
        })
        .collect()
}

/// Composed embedding of a query image and caption.
pub fn embed_query<F: Real, B: Backbone<F> + ?Sized>(
    model: &FusionModel<F>,
    backbone: &B,
    image_id: &str,
    caption: &str,
    change: Option<&Change>,
) -> Result<Tensor<F>> {
    let img = backbone.encode_image(image_id)?;
    let txt = backbone.encode_text(caption, change)?;
    model.fuse(&FusionInput {
        img_pooled: &img.pooled,
        txt_pooled: &txt.pooled,
        img_tokens: &img.tokens,
        txt_tokens: &txt.tokens,
    })
}

/// Scores of every query phrasing against a pre-embedded catalog.
pub fn score_queries<B: Backbone<f32> + ?Sized>(
    model: &FusionModel<f32>,
    backbone: &B,
    queries: &[QuerySpec],
    catalog_ids: &[String],
    catalog: &[Tensor<f32>],
) -> Result<ScoreMatrix> {
    if catalog_ids.len() != catalog.len() {
        return Err(Error::Dimension(format!(
            "{} catalog ids for {} embeddings",
            catalog_ids.len(),
            catalog.len()
        )));
    }
    let rows = queries
        .par_iter()
        .map(|q| {
            q.phrasings
                .iter()
                .map(|caption| {
                    let e = embed_query(model, backbone, &q.image_id, caption, q.change.as_ref())?;
                    score(&e, catalog)
                })
                .collect::<Result<Vec<Vec<f32>>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ScoreMatrix::new(catalog_ids.to_vec())?;
    for (q, phrasings) in queries.iter().zip(rows) {
        for (p, s) in phrasings.iter().enumerate() {
            out.push_row(&q.query_id, p, s)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f32,
}

/// The `k` best catalog items; `k` is clamped to the catalog size.
pub fn top_k(scores: &[f32], ids: &[String], k: usize) -> Result<Vec<Hit>> {
    let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
    let order = rank_by_score(&s, ids)?;
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| Hit {
            id: ids[i].clone(),
            score: scores[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{EncoderConfig, SyntheticBackbone, SyntheticEncoder, SyntheticWorld, WorldConfig};
    use crate::fusion::FusionConfig;

    #[test]
    fn exact_composed_match_ranks_first() {
        let world = SyntheticWorld::generate(&WorldConfig::default()).unwrap();
        let enc = SyntheticEncoder::<f32>::new(&EncoderConfig::default())
            .unwrap()
            .with_noise_sigma(0.0)
            .unwrap();
        let bb = SyntheticBackbone::new(world, enc).unwrap();
        let model = FusionModel::new(&FusionConfig { mode: "va".into(), ..Default::default() }, 64, 0).unwrap();
        let ids = bb.world.ids();
        let catalog = embed_catalog(&model, &bb, &ids).unwrap();
        let q = QuerySpec {
            query_id: "q".into(),
            image_id: ids[0].clone(),
            category: String::new(),
            phrasings: vec![String::new()],
            caption_types: vec![],
            target_id: None,
            change: None,
        };
        let s = score_queries(&model, &bb, &[q], &ids, &catalog).unwrap();
        let hits = top_k(s.row("q", 0).unwrap(), &ids, 1).unwrap();
        assert_eq!(hits[0].id, ids[0]);
        let all = top_k(s.row("q", 0).unwrap(), &ids, 1000).unwrap();
        assert_eq!(all.len(), ids.len());
    }
}
