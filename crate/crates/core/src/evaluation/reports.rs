use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::judgments::{Criterion, Judgments, Question, Thresholds};
use super::metrics::{average_precision_ranked, ndcg_ranked, rank_by_score, CategoryRecall};
use super::queries::{CaptionType, QuerySpec};
use super::scores::ScoreMatrix;
use crate::error::{Error, Result};
use crate::weaksup::AttributeCatalog;

/// One query's metric, averaged over its phrasings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetric {
    pub query_id: String,
    pub category: String,
    /// Catalog items counted as positive (or with nonzero relevance, for nDCG).
    pub positives: usize,
    pub catalog_size: usize,
    /// `None` when the metric is undefined (no positives).
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Mean over evaluated queries, in percent. `None` if none were evaluable.
    pub mean: Option<f64>,
    pub evaluated: usize,
    /// Queries left out because the metric is undefined for them.
    pub excluded: Vec<String>,
    pub per_query: Vec<QueryMetric>,
}

impl MetricSummary {
    fn from_rows(per_query: Vec<QueryMetric>) -> Self {
        let values: Vec<f64> = per_query.iter().filter_map(|q| q.value).collect();
        let excluded = per_query
            .iter()
            .filter(|q| q.value.is_none())
            .map(|q| q.query_id.clone())
            .collect();
        let mean = (!values.is_empty()).then(|| 100.0 * values.iter().sum::<f64>() / values.len() as f64);
        Self {
            mean,
            evaluated: values.len(),
            excluded,
            per_query,
        }
    }

    /// Mean over the evaluated queries accepted by `keep`, in percent.
    pub fn mean_where(&self, keep: impl Fn(&QueryMetric) -> bool) -> (Option<f64>, usize) {
        let values: Vec<f64> = self.per_query.iter().filter(|q| keep(q)).filter_map(|q| q.value).collect();
        let n = values.len();
        ((n > 0).then(|| 100.0 * values.iter().sum::<f64>() / n as f64), n)
    }
}

/// Mean over phrasings of `metric` applied to the query's ranked catalog.
fn per_phrasing_mean<T: Copy>(
    scores: &ScoreMatrix,
    query: &QuerySpec,
    catalog: &[String],
    grades: &[T],
    metric: impl Fn(&[T]) -> Result<Option<f64>>,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    for p in 0..query.phrasings.len() {
        let s = scores.scores_for(&query.query_id, p, catalog)?;
        let order = rank_by_score(&s, catalog)?;
        let ranked: Vec<T> = order.iter().map(|&i| grades[i]).collect();
        match metric(&ranked)? {
            Some(v) => sum += v,
            None => return Ok(None),
        }
    }
    Ok(Some(sum / query.phrasings.len() as f64))
}

fn judged_catalog(judgments: &Judgments, query: &QuerySpec) -> Result<Vec<String>> {
    let catalog = judgments.judged_catalog(&query.query_id);
    if catalog.is_empty() {
        return Err(Error::Data(format!("query {} has no judgments", query.query_id)));
    }
    Ok(catalog)
}

/// Per-query AP against thresholded judgments, averaged over phrasings; mean over
/// queries with at least one positive. Each query is ranked against the catalog
/// images judged for it.
pub fn map_cfq(
    scores: &ScoreMatrix,
    queries: &[QuerySpec],
    judgments: &Judgments,
    criterion: Criterion,
    thresholds: &Thresholds,
) -> Result<MetricSummary> {
    let rows = queries
        .par_iter()
        .map(|q| {
            let catalog = judged_catalog(judgments, q)?;
            let labels = catalog
                .iter()
                .map(|c| judgments.label(&q.query_id, c, criterion, thresholds))
                .collect::<Result<Vec<bool>>>()?;
            let positives = labels.iter().filter(|&&l| l).count();
            let value = if positives == 0 {
                None
            } else {
                per_phrasing_mean(scores, q, &catalog, &labels, |r| Ok(average_precision_ranked(r)))?
            };
            Ok(QueryMetric {
                query_id: q.query_id.clone(),
                category: q.category.clone(),
                positives,
                catalog_size: catalog.len(),
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSummary::from_rows(rows))
}

/// nDCG with graded relevance `accuracy + reasonableness + 2`.
pub fn ndcg_cfq(scores: &ScoreMatrix, queries: &[QuerySpec], judgments: &Judgments) -> Result<MetricSummary> {
    let rows = queries
        .par_iter()
        .map(|q| {
            let catalog = judged_catalog(judgments, q)?;
            let grades = catalog
                .iter()
                .map(|c| judgments.relevance_grade(&q.query_id, c))
                .collect::<Result<Vec<f64>>>()?;
            let positives = grades.iter().filter(|&&g| g > 0.0).count();
            let value = per_phrasing_mean(scores, q, &catalog, &grades, ndcg_ranked)?;
            Ok(QueryMetric {
                query_id: q.query_id.clone(),
                category: q.category.clone(),
                positives,
                catalog_size: catalog.len(),
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSummary::from_rows(rows))
}

/// mAP where a catalog item is correct iff its attribute set equals the query
/// image's attributes with the query's change applied. Ranks every scored item.
pub fn imfq_map(scores: &ScoreMatrix, catalog: &AttributeCatalog, queries: &[QuerySpec]) -> Result<MetricSummary> {
    let columns = scores.columns().to_vec();
    let item_labels = columns
        .iter()
        .map(|id| catalog.labels(id))
        .collect::<Result<Vec<_>>>()?;
    let rows = queries
        .par_iter()
        .map(|q| {
            let change = q
                .change
                .as_ref()
                .ok_or_else(|| Error::Data(format!("query {} has no change descriptor", q.query_id)))?;
            let wanted = change.apply(catalog.labels(&q.image_id)?).map_err(|e| {
                Error::Data(format!("query {}: {e}", q.query_id))
            })?;
            let labels: Vec<bool> = item_labels.iter().map(|l| **l == wanted).collect();
            let positives = labels.iter().filter(|&&l| l).count();
            let value = if positives == 0 {
                None
            } else {
                per_phrasing_mean(scores, q, &columns, &labels, |r| Ok(average_precision_ranked(r)))?
            };
            Ok(QueryMetric {
                query_id: q.query_id.clone(),
                category: q.category.clone(),
                positives,
                catalog_size: columns.len(),
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSummary::from_rows(rows))
}

/// Zero-based rank of the target for every (query, phrasing) row.
pub fn target_ranks(scores: &ScoreMatrix, queries: &[QuerySpec]) -> Result<Vec<(String, usize)>> {
    let columns = scores.columns();
    let per_query = queries
        .par_iter()
        .map(|q| {
            let target = q
                .target_id
                .as_ref()
                .ok_or_else(|| Error::Data(format!("query {} has no target", q.query_id)))?;
            let t = columns
                .iter()
                .position(|c| c == target)
                .ok_or_else(|| Error::Lookup(format!("target {target} is not in the catalog")))?;
            (0..q.phrasings.len())
                .map(|p| {
                    let s: Vec<f64> = scores.row(&q.query_id, p)?.iter().map(|&x| x as f64).collect();
                    let order = rank_by_score(&s, columns)?;
                    let rank = order.iter().position(|&i| i == t).expect("target column is ranked");
                    Ok((q.category.clone(), rank))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub categories: Vec<CategoryRecall>,
    pub score: f64,
}

/// Per-category R@10 and R@50 over single-target queries and their mean.
pub fn recall_report(scores: &ScoreMatrix, queries: &[QuerySpec]) -> Result<RecallReport> {
    let ranks = target_ranks(scores, queries)?;
    if ranks.is_empty() {
        return Err(Error::Data("recall over zero queries".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (cat, r) in &ranks {
        groups.entry(cat.as_str()).or_default().push(*r);
    }
    let pct = |rs: &[usize], k: usize| 100.0 * rs.iter().filter(|&&r| r < k).count() as f64 / rs.len() as f64;
    let categories: Vec<CategoryRecall> = groups
        .into_iter()
        .map(|(cat, rs)| CategoryRecall {
            category: cat.to_string(),
            r10: pct(&rs, 10),
            r50: pct(&rs, 50),
        })
        .collect();
    let score = super::metrics::fiq_score(&categories)?;
    Ok(RecallReport { categories, score })
}

/// Percentage of (query, phrasing) rows whose target ranks within `k`.
pub fn recall_at(scores: &ScoreMatrix, queries: &[QuerySpec], k: usize) -> Result<f64> {
    let ranks = target_ranks(scores, queries)?;
    if ranks.is_empty() {
        return Err(Error::Data("recall over zero queries".into()));
    }
    Ok(100.0 * ranks.iter().filter(|(_, r)| *r < k).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerQueryRow {
    pub query_id: String,
    pub category: String,
    pub fraction_relevant: f64,
    pub ap: Option<f64>,
    /// Expected AP of a random ranking, approximately the fraction relevant.
    pub random_baseline: f64,
}

pub fn per_query_report(
    scores: &ScoreMatrix,
    queries: &[QuerySpec],
    judgments: &Judgments,
    criterion: Criterion,
    thresholds: &Thresholds,
) -> Result<Vec<PerQueryRow>> {
    let summary = map_cfq(scores, queries, judgments, criterion, thresholds)?;
    Ok(summary
        .per_query
        .into_iter()
        .map(|q| {
            let fraction = q.positives as f64 / q.catalog_size as f64;
            PerQueryRow {
                query_id: q.query_id,
                category: q.category,
                fraction_relevant: fraction,
                ap: q.value,
                random_baseline: fraction,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionTypeRow {
    pub caption_type: String,
    pub queries: usize,
    pub accuracy_map: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptionTypeReport {
    pub rows: Vec<CaptionTypeRow>,
    /// Why a caption type has no row.
    pub notes: Vec<String>,
}

/// Accuracy mAP restricted to the queries tagged with each caption type.
pub fn caption_type_report(
    scores: &ScoreMatrix,
    queries: &[QuerySpec],
    judgments: &Judgments,
    thresholds: &Thresholds,
) -> Result<CaptionTypeReport> {
    let summary = map_cfq(scores, queries, judgments, Criterion::Accurate, thresholds)?;
    let tags: HashMap<&str, &[CaptionType]> =
        queries.iter().map(|q| (q.query_id.as_str(), q.caption_types.as_slice())).collect();
    let mut report = CaptionTypeReport::default();
    let all = [
        CaptionType::Elements,
        CaptionType::Pattern,
        CaptionType::Shape,
        CaptionType::Color,
        CaptionType::Conjunction,
        CaptionType::Negation,
        CaptionType::Modification,
        CaptionType::Relative,
    ];
    for t in all {
        let (mean, n) = summary.mean_where(|q| tags[q.query_id.as_str()].contains(&t));
        match mean {
            Some(m) => report.rows.push(CaptionTypeRow {
                caption_type: t.name().into(),
                queries: n,
                accuracy_map: m,
            }),
            None => report.notes.push(format!("{}: no evaluable queries", t.name())),
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub criterion: String,
    pub threshold: f64,
    pub positives: usize,
    pub map: Option<f64>,
}

/// mAP for `criterion` as the threshold of `question` varies, others at default.
pub fn threshold_sweep(
    scores: &ScoreMatrix,
    queries: &[QuerySpec],
    judgments: &Judgments,
    criterion: Criterion,
    question: Question,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&t| {
            let th = Thresholds::default().with(question, t);
            let s = map_cfq(scores, queries, judgments, criterion, &th)?;
            Ok(SweepRow {
                criterion: criterion.name().into(),
                threshold: t,
                positives: s.per_query.iter().map(|q| q.positives).sum(),
                map: s.mean,
            })
        })
        .collect()
}

/// The thresholds a graded score can straddle: every multiple of 1/3 in [-1, 1].
pub fn default_sweep_values() -> Vec<f64> {
    (-3..=3).map(|k| k as f64 / 3.0).collect()
}
