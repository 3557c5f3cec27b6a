use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};

/// Question asked of annotators about a (query, catalog image) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Question {
    /// Does the image match the caption?
    Accurate,
    /// Is the image a reasonable response to the query image?
    Reasonable,
}

/// Binary label derived from one or both questions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Accurate,
    Reasonable,
    /// Both accurate and reasonable.
    Relevant,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Accurate, Criterion::Reasonable, Criterion::Relevant];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Accurate => "accurate",
            Criterion::Reasonable => "reasonable",
            Criterion::Relevant => "relevant",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "accurate" | "accuracy" => Ok(Self::Accurate),
            "reasonable" | "reasonableness" => Ok(Self::Reasonable),
            "relevant" | "relevance" => Ok(Self::Relevant),
            other => Err(Error::Config(format!(
                "unknown criterion {other} (accurate | reasonable | relevant)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub query_id: String,
    pub catalog_id: String,
    pub question: Question,
    pub judgments: Vec<i8>,
}

pub const ANNOTATORS: usize = 3;

impl JudgmentRecord {
    pub fn validate(&self) -> Result<()> {
        if self.judgments.len() != ANNOTATORS {
            return Err(Error::Data(format!(
                "({}, {}, {:?}) has {} judgments, expected {ANNOTATORS}",
                self.query_id,
                self.catalog_id,
                self.question,
                self.judgments.len()
            )));
        }
        if let Some(j) = self.judgments.iter().find(|j| !(-1..=1).contains(*j)) {
            return Err(Error::Data(format!(
                "({}, {}) judgment {j} outside {{-1, 0, 1}}",
                self.query_id, self.catalog_id
            )));
        }
        Ok(())
    }
}

pub fn load_judgments(path: &Path) -> Result<Vec<JudgmentRecord>> {
    read_jsonl(path)
}

pub fn save_judgments(path: &Path, records: &[JudgmentRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Graded scores in [-1, 1] per (query, catalog image, question).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Judgments {
    graded: BTreeMap<(String, String, Question), f64>,
}

/// Mean annotator value for every (query, catalog image, question).
pub fn aggregate_judgments(records: &[JudgmentRecord]) -> Result<Judgments> {
    let mut graded = BTreeMap::new();
    for r in records {
        r.validate()?;
        let mean = r.judgments.iter().map(|&j| j as f64).sum::<f64>() / ANNOTATORS as f64;
        let key = (r.query_id.clone(), r.catalog_id.clone(), r.question);
        if graded.insert(key, mean).is_some() {
            return Err(Error::Data(format!(
                "duplicate judgment for ({}, {}, {:?})",
                r.query_id, r.catalog_id, r.question
            )));
        }
    }
    Ok(Judgments { graded })
}

impl Judgments {
    pub fn get(&self, query_id: &str, catalog_id: &str, question: Question) -> Result<f64> {
        self.graded
            .get(&(query_id.to_string(), catalog_id.to_string(), question))
            .copied()
            .ok_or_else(|| {
                Error::Data(format!(
                    "missing {question:?} judgment for ({query_id}, {catalog_id})"
                ))
            })
    }

    pub fn len(&self) -> usize {
        self.graded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graded.is_empty()
    }

    pub fn query_ids(&self) -> BTreeSet<&str> {
        self.graded.keys().map(|(q, _, _)| q.as_str()).collect()
    }

    /// Catalog images judged for `query_id` under either question, sorted.
    pub fn judged_catalog(&self, query_id: &str) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .graded
            .keys()
            .filter(|(q, _, _)| q == query_id)
            .map(|(_, c, _)| c.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Graded relevance for nDCG: accuracy + reasonableness + 2, in [0, 4].
    pub fn relevance_grade(&self, query_id: &str, catalog_id: &str) -> Result<f64> {
        Ok(self.get(query_id, catalog_id, Question::Accurate)?
            + self.get(query_id, catalog_id, Question::Reasonable)?
            + 2.0)
    }

    pub fn label(&self, query_id: &str, catalog_id: &str, criterion: Criterion, t: &Thresholds) -> Result<bool> {
        let acc = || self.get(query_id, catalog_id, Question::Accurate);
        let reas = || self.get(query_id, catalog_id, Question::Reasonable);
        Ok(match criterion {
            Criterion::Accurate => t.binarize(acc()?, Question::Accurate),
            Criterion::Reasonable => t.binarize(reas()?, Question::Reasonable),
            Criterion::Relevant => {
                t.binarize(acc()?, Question::Accurate) && t.binarize(reas()?, Question::Reasonable)
            }
        })
    }
}

/// Graded scores are multiples of 1/3; this absorbs rounding at the boundaries.
const GRADE_TOLERANCE: f64 = 1e-9;

/// Decision thresholds on graded scores. Accuracy is positive strictly above its
/// threshold; reasonableness at or above its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub accurate: f64,
    pub reasonable: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            accurate: 0.0,
            reasonable: -2.0 / 3.0,
        }
    }
}

impl Thresholds {
    pub fn binarize(&self, score: f64, question: Question) -> bool {
        match question {
            Question::Accurate => score > self.accurate + GRADE_TOLERANCE,
            Question::Reasonable => score >= self.reasonable - GRADE_TOLERANCE,
        }
    }

    pub fn get(&self, question: Question) -> f64 {
        match question {
            Question::Accurate => self.accurate,
            Question::Reasonable => self.reasonable,
        }
    }

    pub fn with(mut self, question: Question, value: f64) -> Self {
        match question {
            Question::Accurate => self.accurate = value,
            Question::Reasonable => self.reasonable = value,
        }
        self
    }
}

/// Binarizes with the default thresholds.
pub fn binarize(score: f64, question: Question) -> bool {
    Thresholds::default().binarize(score, question)
}
