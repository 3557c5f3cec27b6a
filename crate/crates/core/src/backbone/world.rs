//! Synthetic attribute worlds: items described by one value per attribute group,
//! each (group, value) pair owning a fixed random unit concept vector.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::bundle::{read_json, write_json};
use crate::rng::stream;
use crate::weaksup::{canonical, AttributeCatalog, Change, Schema};

const NAMED_GROUPS: [(&str, [&str; 4]); 8] = [
    ("color", ["red", "black", "blue", "white"]),
    ("material", ["cotton", "lace", "denim", "silk"]),
    ("pattern", ["floral", "solid", "striped", "dotted"]),
    ("sleeve", ["long", "short", "sleeveless", "cap"]),
    ("neckline", ["v-neck", "crew", "halter", "scoop"]),
    ("length", ["mini", "maxi", "midi", "knee"]),
    ("fit", ["fitted", "loose", "oversized", "slim"]),
    ("closure", ["zipper", "buttons", "wrap", "pullover"]),
];

/// Fashion-flavoured names when they suffice, `g{i}` / `g{i}v{j}` otherwise.
pub fn default_schema(groups: usize, values_per_group: usize) -> Result<Schema> {
    if groups == 0 || values_per_group < 2 {
        return Err(Error::Config(
            "a synthetic world needs at least one group with two or more values".into(),
        ));
    }
    let named = groups <= NAMED_GROUPS.len() && values_per_group <= 4;
    let map: IndexMap<String, Vec<String>> = (0..groups)
        .map(|g| {
            if named {
                let (name, values) = NAMED_GROUPS[g];
                (
                    name.to_string(),
                    values[..values_per_group].iter().map(|v| v.to_string()).collect(),
                )
            } else {
                (
                    format!("g{g}"),
                    (0..values_per_group).map(|v| format!("g{g}v{v}")).collect(),
                )
            }
        })
        .collect();
    Schema::new(map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub groups: usize,
    pub values_per_group: usize,
    pub items: usize,
    pub concept_dim: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            values_per_group: 2,
            items: 64,
            concept_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldItem {
    pub id: String,
    /// Value index per group, in schema order.
    pub values: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WorldFile {
    seed: u64,
    concept_dim: usize,
    schema: Schema,
    items: Vec<BTreeMap<String, String>>,
    ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    schema: Schema,
    items: Vec<WorldItem>,
    position: HashMap<String, usize>,
    concept_dim: usize,
    seed: u64,
    /// `[group][value]` unit vectors of length `concept_dim`.
    value_vectors: Vec<Vec<Vec<f64>>>,
}

impl PartialEq for SyntheticWorld {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.items == other.items
            && self.concept_dim == other.concept_dim
            && self.seed == other.seed
    }
}

fn unit_vector(rng: &mut crate::rng::Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        let schema = default_schema(config.groups, config.values_per_group)?;
        let empty = Self::with_schema(schema, config.concept_dim, config.seed)?;
        empty.resample(config.items, "item")
    }

    /// A world with the given schema and concept vectors but no items.
    pub fn with_schema(schema: Schema, concept_dim: usize, seed: u64) -> Result<Self> {
        if concept_dim == 0 {
            return Err(Error::Config("concept dimension must be positive".into()));
        }
        if schema.groups.values().any(|vs| vs.is_empty()) {
            return Err(Error::Config("every group needs at least one value".into()));
        }
        let mut rng = stream(seed, "concepts");
        let value_vectors = schema
            .groups
            .values()
            .map(|vs| vs.iter().map(|_| unit_vector(&mut rng, concept_dim)).collect())
            .collect();
        Ok(Self {
            schema,
            items: Vec::new(),
            position: HashMap::new(),
            concept_dim,
            seed,
            value_vectors,
        })
    }

    /// Same schema and concept vectors, `count` freshly drawn distinct items with
    /// ids `{prefix}000`, `{prefix}001`, ...
    pub fn resample(&self, count: usize, prefix: &str) -> Result<Self> {
        let radices: Vec<usize> = self.schema.groups.values().map(|vs| vs.len()).collect();
        let total = radices
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .ok_or_else(|| Error::Config("attribute space too large to index".into()))?;
        if count > total {
            return Err(Error::Config(format!(
                "cannot draw {count} distinct items from {total} attribute combinations"
            )));
        }
        let mut rng = stream(self.seed, &format!("items:{prefix}"));
        let width = count.saturating_sub(1).to_string().len().max(3);
        let mut world = Self {
            items: Vec::with_capacity(count),
            position: HashMap::with_capacity(count),
            ..self.clone()
        };
        for (i, code) in sample(&mut rng, total, count).into_iter().enumerate() {
            let mut rest = code;
            let values = radices
                .iter()
                .map(|&r| {
                    let v = rest % r;
                    rest /= r;
                    v
                })
                .collect();
            world.push(WorldItem {
                id: format!("{prefix}{i:0width$}"),
                values,
            })?;
        }
        Ok(world)
    }

    pub fn push(&mut self, item: WorldItem) -> Result<()> {
        if item.values.len() != self.schema.groups.len() {
            return Err(Error::Data(format!(
                "item {} assigns {} values for {} groups",
                item.id,
                item.values.len(),
                self.schema.groups.len()
            )));
        }
        for (v, vs) in item.values.iter().zip(self.schema.groups.values()) {
            if *v >= vs.len() {
                return Err(Error::Vocabulary(format!("item {} has value index {v} out of range", item.id)));
            }
        }
        if self.position.contains_key(&item.id) {
            return Err(Error::Data(format!("duplicate item id {}", item.id)));
        }
        self.position.insert(item.id.clone(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn items(&self) -> &[WorldItem] {
        &self.items
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|it| it.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn concept_dim(&self) -> usize {
        self.concept_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn item(&self, id: &str) -> Result<&WorldItem> {
        self.position
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Lookup(format!("item {id} not in synthetic world")))
    }

    fn value_vector(&self, group: &str, value: &str) -> Result<&[f64]> {
        let (g, _, values) = self
            .schema
            .groups
            .get_full(&canonical(group))
            .ok_or_else(|| Error::Vocabulary(format!("unknown group {group}")))?;
        let v = values
            .iter()
            .position(|x| *x == canonical(value))
            .ok_or_else(|| Error::Vocabulary(format!("unknown value {value} in group {group}")))?;
        Ok(&self.value_vectors[g][v])
    }

    /// Mean of the item's value vectors.
    pub fn item_concept(&self, id: &str) -> Result<Vec<f64>> {
        let item = self.item(id)?;
        let mut c = vec![0.0; self.concept_dim];
        for (g, &v) in item.values.iter().enumerate() {
            for (ci, x) in c.iter_mut().zip(&self.value_vectors[g][v]) {
                *ci += x;
            }
        }
        let n = item.values.len() as f64;
        Ok(c.into_iter().map(|x| x / n).collect())
    }

    /// Half the added value vector minus half the removed one.
    pub fn caption_concept(&self, change: &Change) -> Result<Vec<f64>> {
        let (added, removed) = change.terms();
        let mut c = vec![0.0; self.concept_dim];
        if let Some((g, v)) = added {
            for (ci, x) in c.iter_mut().zip(self.value_vector(g, v)?) {
                *ci += 0.5 * x;
            }
        }
        if let Some((g, v)) = removed {
            for (ci, x) in c.iter_mut().zip(self.value_vector(g, v)?) {
                *ci -= 0.5 * x;
            }
        }
        Ok(c)
    }

    pub fn attributes(&self, item: &WorldItem) -> BTreeMap<String, Vec<String>> {
        self.schema
            .groups
            .iter()
            .zip(&item.values)
            .map(|((g, vs), &v)| (g.clone(), vec![vs[v].clone()]))
            .collect()
    }

    pub fn to_catalog(&self) -> Result<AttributeCatalog> {
        let mut cat = AttributeCatalog::new(self.schema.clone());
        for item in &self.items {
            cat.insert(&item.id, &self.attributes(item))?;
        }
        Ok(cat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WorldFile {
            seed: self.seed,
            concept_dim: self.concept_dim,
            schema: self.schema.clone(),
            ids: self.ids(),
            items: self
                .items
                .iter()
                .map(|it| {
                    self.schema
                        .groups
                        .iter()
                        .zip(&it.values)
                        .map(|((g, vs), &v)| (g.clone(), vs[v].clone()))
                        .collect()
                })
                .collect(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: WorldFile = read_json(path)?;
        if file.ids.len() != file.items.len() {
            return Err(Error::format(path, "ids and items differ in length"));
        }
        let schema = Schema::new(file.schema.groups)?;
        let mut world = Self::with_schema(schema, file.concept_dim, file.seed)?;
        for (id, attrs) in file.ids.into_iter().zip(file.items) {
            if attrs.len() != world.schema.groups.len() {
                return Err(Error::format(path, format!("item {id} does not assign every group")));
            }
            let values = world
                .schema
                .groups
                .iter()
                .map(|(g, vs)| {
                    let v = attrs
                        .get(g)
                        .ok_or_else(|| Error::format(path, format!("item {id} lacks group {g}")))?;
                    vs.iter()
                        .position(|x| *x == canonical(v))
                        .ok_or_else(|| Error::Vocabulary(format!("item {id}: {v} not a value of {g}")))
                })
                .collect::<Result<Vec<_>>>()?;
            world.push(WorldItem { id, values })?;
        }
        Ok(world)
    }
}
