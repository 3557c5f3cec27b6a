use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Catalog positions sorted by descending score; ties go to the smaller id.
pub fn rank_by_score<S: AsRef<str>>(scores: &[f64], ids: &[S]) -> Result<Vec<usize>> {
    if scores.len() != ids.len() {
        return Err(Error::Dimension(format!("{} scores for {} ids", scores.len(), ids.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score for {} is {}", ids[i].as_ref(), scores[i])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].as_ref().cmp(ids[b].as_ref()))
    });
    Ok(order)
}

/// Average precision of binary labels listed in rank order; `None` without positives.
pub fn average_precision_ranked(labels: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &positive) in labels.iter().enumerate() {
        if positive {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Average precision of a ranking of ids against a label map.
pub fn average_precision<S: AsRef<str>>(ranking: &[S], labels: &HashMap<String, bool>) -> Result<Option<f64>> {
    let ranked = ranking
        .iter()
        .map(|id| {
            labels
                .get(id.as_ref())
                .copied()
                .ok_or_else(|| Error::Data(format!("ranked id {} has no label", id.as_ref())))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(average_precision_ranked(&ranked))
}

/// nDCG of relevances listed in rank order, with discount `log2(rank + 1)`.
/// `None` when every relevance is zero.
pub fn ndcg_ranked(relevance: &[f64]) -> Result<Option<f64>> {
    if let Some(r) = relevance.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::Data(format!("relevance must be finite and non-negative, got {r}")));
    }
    let dcg = |rs: &[f64]| -> f64 {
        rs.iter()
            .enumerate()
            .map(|(i, r)| r / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let best = dcg(&ideal);
    if best == 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg(relevance) / best))
}

pub fn ndcg<S: AsRef<str>>(ranking: &[S], relevance: &HashMap<String, f64>) -> Result<Option<f64>> {
    let ranked = ranking
        .iter()
        .map(|id| {
            relevance
                .get(id.as_ref())
                .copied()
                .ok_or_else(|| Error::Data(format!("ranked id {} has no relevance", id.as_ref())))
        })
        .collect::<Result<Vec<f64>>>()?;
    ndcg_ranked(&ranked)
}

/// Percentage of queries whose target is among the first `k` ranked ids.
pub fn recall_at_k<S: AsRef<str>, T: AsRef<str>>(rankings: &[Vec<S>], targets: &[T], k: usize) -> Result<f64> {
    if rankings.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} rankings for {} targets",
            rankings.len(),
            targets.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Data("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (ranking, target) in rankings.iter().zip(targets) {
        let pos = ranking
            .iter()
            .position(|id| id.as_ref() == target.as_ref())
            .ok_or_else(|| Error::Lookup(format!("target {} is not in the catalog", target.as_ref())))?;
        if pos < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub category: String,
    pub r10: f64,
    pub r50: f64,
}

/// Mean of every category's R@10 and R@50.
pub fn fiq_score(categories: &[CategoryRecall]) -> Result<f64> {
    if categories.is_empty() {
        return Err(Error::Data("score needs at least one category".into()));
    }
    let sum: f64 = categories.iter().map(|c| c.r10 + c.r50).sum();
    Ok(sum / (2 * categories.len()) as f64)
}
