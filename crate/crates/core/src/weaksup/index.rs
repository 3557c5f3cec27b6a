use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::catalog::{AttributeCatalog, AttributeKey, Labels, Schema};
use super::change::{applicable_changes, generate_caption, CaptionTemplates, Change, SampleMode};
use super::example::{ExampleSource, TrainingExample};
use crate::error::{Error, Result};

/// Consecutive empty draws tolerated by [`generate_epoch`] before giving up.
pub const MAX_CONSECUTIVE_RETRIES: usize = 1000;

/// Inverted index from canonical label sets to the images carrying them.
#[derive(Clone, Debug)]
pub struct AttributeIndex {
    schema: Schema,
    ids: Vec<String>,
    labels: Vec<Labels>,
    by_key: BTreeMap<AttributeKey, Vec<usize>>,
    by_value: BTreeMap<(String, String), Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledPair {
    pub query_id: String,
    pub target_id: String,
    pub change: Change,
}

pub fn build_index(catalog: &AttributeCatalog) -> Result<AttributeIndex> {
    let mut ids = Vec::with_capacity(catalog.len());
    let mut labels = Vec::with_capacity(catalog.len());
    let mut by_key: BTreeMap<AttributeKey, Vec<usize>> = BTreeMap::new();
    let mut by_value: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, (id, l)) in catalog.iter().enumerate() {
        if l.values().all(|s| s.is_empty()) {
            return Err(Error::Data(format!("image {id} has no attribute labels")));
        }
        by_key.entry(AttributeKey::of(l)).or_default().push(i);
        for (g, vs) in l {
            for v in vs {
                by_value.entry((g.clone(), v.clone())).or_default().push(i);
            }
        }
        ids.push(id.clone());
        labels.push(l.clone());
    }
    Ok(AttributeIndex {
        schema: catalog.schema.clone(),
        ids,
        labels,
        by_key,
        by_value,
    })
}

impl AttributeIndex {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn key_count(&self) -> usize {
        self.by_key.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .map_err(|_| Error::Lookup(format!("image {id} not indexed")))
    }

    pub fn labels_of(&self, id: &str) -> Result<&Labels> {
        Ok(&self.labels[self.position(id)?])
    }

    pub fn key_of(&self, id: &str) -> Result<AttributeKey> {
        Ok(AttributeKey::of(self.labels_of(id)?))
    }

    /// Images whose label set equals `labels` exactly.
    pub fn lookup(&self, labels: &Labels) -> Vec<&str> {
        self.by_key
            .get(&AttributeKey::of(labels))
            .map(|v| v.iter().map(|&i| self.ids[i].as_str()).collect())
            .unwrap_or_default()
    }

    /// Images carrying the label `group = value`.
    pub fn with_value(&self, group: &str, value: &str) -> Vec<&str> {
        self.by_value
            .get(&(group.to_string(), value.to_string()))
            .map(|v| v.iter().map(|&i| self.ids[i].as_str()).collect())
            .unwrap_or_default()
    }

    /// All `(change, target)` pairs reachable from `id` through one change of `mode`.
    pub fn neighbors(&self, id: &str, mode: SampleMode) -> Result<Vec<(Change, String)>> {
        let labels = self.labels_of(id)?;
        let mut out = Vec::new();
        for change in applicable_changes(&self.schema, labels, mode) {
            let target = change.apply(labels)?;
            for t in self.lookup(&target) {
                out.push((change.clone(), t.to_string()));
            }
        }
        Ok(out)
    }
}

/// Draws a query uniformly, then an applicable change uniformly, then a target
/// uniformly among images carrying the modified label set. `None` when the drawn
/// change has no target in the catalog.
pub fn sample_pair(index: &AttributeIndex, rng: &mut impl Rng, mode: SampleMode) -> Option<SampledPair> {
    if index.is_empty() {
        return None;
    }
    let qi = rng.random_range(0..index.len());
    let labels = &index.labels[qi];
    let changes = applicable_changes(&index.schema, labels, mode);
    if changes.is_empty() {
        return None;
    }
    let change = changes[rng.random_range(0..changes.len())].clone();
    let target = change.apply(labels).ok()?;
    let targets = index.by_key.get(&AttributeKey::of(&target))?;
    let ti = targets[rng.random_range(0..targets.len())];
    Some(SampledPair {
        query_id: index.ids[qi].clone(),
        target_id: index.ids[ti].clone(),
        change,
    })
}

#[derive(Clone, Debug)]
pub struct EpochOptions {
    pub mode: SampleMode,
    pub templates: CaptionTemplates,
    pub source: ExampleSource,
}

impl Default for EpochOptions {
    fn default() -> Self {
        Self {
            mode: SampleMode::Swap,
            templates: CaptionTemplates::default(),
            source: ExampleSource::Imfq,
        }
    }
}

/// `count` weakly supervised examples, deterministic in `seed`.
pub fn generate_epoch(
    index: &AttributeIndex,
    count: usize,
    seed: u64,
    options: &EpochOptions,
) -> Result<Vec<TrainingExample>> {
    if count == 0 {
        return Err(Error::Config("example count must be positive".into()));
    }
    if index.is_empty() {
        return Err(Error::Data("cannot sample from an empty index".into()));
    }
    let mut rng = crate::rng::stream(seed, "sampler");
    let mut out = Vec::with_capacity(count);
    let mut misses = 0;
    while out.len() < count {
        match sample_pair(index, &mut rng, options.mode) {
            Some(pair) => {
                misses = 0;
                let caption = generate_caption(&pair.change, &options.templates, &mut rng);
                out.push(TrainingExample {
                    query_id: pair.query_id,
                    caption,
                    target_id: pair.target_id,
                    source: options.source,
                    change: Some(pair.change),
                });
            }
            None => {
                misses += 1;
                if misses >= MAX_CONSECUTIVE_RETRIES {
                    return Err(Error::Data(format!(
                        "sampling starvation: no valid pair in {MAX_CONSECUTIVE_RETRIES} consecutive draws"
                    )));
                }
            }
        }
    }
    Ok(out)
}

fn label_pairs(labels: &Labels) -> BTreeSet<(String, String)> {
    labels
        .iter()
        .flat_map(|(g, vs)| vs.iter().map(move |v| (g.clone(), v.clone())))
        .collect()
}

/// Checks that an example's two images differ by exactly the one label change it
/// records, using a plain set difference of their labels.
pub fn validate_example(catalog: &AttributeCatalog, ex: &TrainingExample, mode: SampleMode) -> Result<()> {
    if ex.query_id == ex.target_id {
        return Err(Error::Data(format!("example uses {} as query and target", ex.query_id)));
    }
    let q = label_pairs(catalog.labels(&ex.query_id)?);
    let t = label_pairs(catalog.labels(&ex.target_id)?);
    let only_q: Vec<_> = q.difference(&t).collect();
    let only_t: Vec<_> = t.difference(&q).collect();
    let bad = |why: &str| {
        Err(Error::Data(format!(
            "{} -> {}: {why} (query-only {only_q:?}, target-only {only_t:?})",
            ex.query_id, ex.target_id
        )))
    };
    match mode {
        SampleMode::Swap => {
            if only_q.len() != 1 || only_t.len() != 1 || only_q[0].0 != only_t[0].0 {
                return bad("not a single within-group swap");
            }
        }
        SampleMode::Toggle => {
            if only_q.len() + only_t.len() != 1 {
                return bad("symmetric difference is not a single label");
            }
        }
    }
    if let Some(change) = &ex.change {
        let expected = match change {
            Change::Swap { group, from, to } => {
                only_q == [&(group.clone(), from.clone())] && only_t == [&(group.clone(), to.clone())]
            }
            Change::Add { group, value } => only_q.is_empty() && only_t == [&(group.clone(), value.clone())],
            Change::Remove { group, value } => {
                only_t.is_empty() && only_q == [&(group.clone(), value.clone())]
            }
        };
        if !expected {
            return bad(&format!("recorded change {change} disagrees"));
        }
    }
    Ok(())
}
