//! Retrieval metrics and reports.
//!
//! Rankings sort catalog items by descending score and break ties by ascending
//! id. Judged queries are scored per phrasing and the per-phrasing metric is
//! averaged; queries without any positive item are excluded from a mean and
//! listed separately. Graded judgments are annotator means in [-1, 1].

pub mod judgments;
pub mod metrics;
pub mod queries;
pub mod reports;
pub mod scores;

pub use judgments::{
    aggregate_judgments, binarize, load_judgments, save_judgments, Criterion, JudgmentRecord, Judgments, Question,
    Thresholds, ANNOTATORS,
};
pub use metrics::{
    average_precision, average_precision_ranked, fiq_score, ndcg, ndcg_ranked, rank_by_score, recall_at_k,
    CategoryRecall,
};
pub use queries::{by_id, check_queries, load_queries, save_queries, CaptionType, QuerySpec, CFQ_PHRASINGS};
pub use reports::{
    caption_type_report, default_sweep_values, imfq_map, map_cfq, ndcg_cfq, per_query_report, recall_at,
    recall_report, target_ranks, threshold_sweep, CaptionTypeReport, CaptionTypeRow, MetricSummary, PerQueryRow,
    QueryMetric, RecallReport, SweepRow,
};
pub use scores::{ScoreMatrix, ScoreRow};
