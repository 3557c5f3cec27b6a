use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::numerics::bundle::{read_json, write_json};

/// Attribute values are compared after lowercasing and trimming.
pub fn canonical(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Declared attribute groups and their allowed values, in declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub groups: IndexMap<String, Vec<String>>,
}

impl Schema {
    pub fn new(groups: IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut canon = IndexMap::new();
        for (g, values) in groups {
            let g = canonical(&g);
            let mut seen = BTreeSet::new();
            let mut vs = Vec::with_capacity(values.len());
            for v in values {
                let v = canonical(&v);
                if v.is_empty() {
                    return Err(Error::Data(format!("empty value in group {g}")));
                }
                if !seen.insert(v.clone()) {
                    return Err(Error::Data(format!("duplicate value {v} in group {g}")));
                }
                vs.push(v);
            }
            if canon.insert(g.clone(), vs).is_some() {
                return Err(Error::Data(format!("duplicate group {g}")));
            }
        }
        Ok(Self { groups: canon })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Schema = read_json(path)?;
        Self::new(raw.groups)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn values(&self, group: &str) -> Option<&[String]> {
        self.groups.get(group).map(|v| v.as_slice())
    }

    pub fn contains(&self, group: &str, value: &str) -> bool {
        self.values(group)
            .is_some_and(|vs| vs.iter().any(|v| v == value))
    }

    /// Groups that declare `value`, in schema order.
    pub fn groups_with(&self, value: &str) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, vs)| vs.iter().any(|v| v == value))
            .map(|(g, _)| g.as_str())
            .collect()
    }

    pub fn all_values(&self) -> BTreeSet<&str> {
        self.groups
            .values()
            .flat_map(|vs| vs.iter().map(|v| v.as_str()))
            .collect()
    }
}

/// Labels of one image: group -> non-empty set of values.
pub type Labels = BTreeMap<String, BTreeSet<String>>;

/// Canonical sorted `(group, value)` list; equal keys mean identical label sets.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttributeKey(pub Vec<(String, String)>);

impl AttributeKey {
    pub fn of(labels: &Labels) -> Self {
        let mut pairs = Vec::new();
        for (g, vs) in labels {
            for v in vs {
                pairs.push((g.clone(), v.clone()));
            }
        }
        Self(pairs)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogLine {
    pub image_id: String,
    pub attributes: BTreeMap<String, Vec<String>>,
}

/// Attribute labels for a set of images, validated against a schema.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCatalog {
    pub schema: Schema,
    items: BTreeMap<String, Labels>,
}

impl AttributeCatalog {
    pub fn new(schema: Schema) -> Self {
        Self {
            schema,
            items: BTreeMap::new(),
        }
    }

    /// Builds a schema from the values observed in `lines` (groups and values sorted).
    pub fn infer_schema(lines: &[CatalogLine]) -> Result<Schema> {
        let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for line in lines {
            for (g, vs) in &line.attributes {
                let entry = groups.entry(canonical(g)).or_default();
                for v in vs {
                    entry.insert(canonical(v));
                }
            }
        }
        Schema::new(
            groups
                .into_iter()
                .map(|(g, vs)| (g, vs.into_iter().collect()))
                .collect(),
        )
    }

    pub fn insert(&mut self, image_id: &str, attributes: &BTreeMap<String, Vec<String>>) -> Result<()> {
        let id = image_id.trim().to_string();
        if id.is_empty() {
            return Err(Error::Data("empty image id".into()));
        }
        if self.items.contains_key(&id) {
            return Err(Error::Data(format!("duplicate image id {id}")));
        }
        let mut labels = Labels::new();
        for (g, vs) in attributes {
            let g = canonical(g);
            if !self.schema.groups.contains_key(&g) {
                return Err(Error::Vocabulary(format!("group {g} (image {id}) not in schema")));
            }
            for v in vs {
                let v = canonical(v);
                if !self.schema.contains(&g, &v) {
                    return Err(Error::Vocabulary(format!(
                        "value {v} of group {g} (image {id}) not in schema"
                    )));
                }
                labels.entry(g.clone()).or_default().insert(v);
            }
        }
        self.items.insert(id, labels);
        Ok(())
    }

    pub fn from_lines(schema: Option<Schema>, lines: &[CatalogLine]) -> Result<Self> {
        let schema = match schema {
            Some(s) => s,
            None => Self::infer_schema(lines)?,
        };
        let mut cat = Self::new(schema);
        for line in lines {
            cat.insert(&line.image_id, &line.attributes)?;
        }
        Ok(cat)
    }

    pub fn load(path: &Path, schema: Option<Schema>) -> Result<Self> {
        let lines: Vec<CatalogLine> = read_jsonl(path)?;
        Self::from_lines(schema, &lines)
    }

    pub fn to_lines(&self) -> Vec<CatalogLine> {
        self.items
            .iter()
            .map(|(id, labels)| CatalogLine {
                image_id: id.clone(),
                attributes: labels
                    .iter()
                    .map(|(g, vs)| (g.clone(), vs.iter().cloned().collect()))
                    .collect(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.to_lines())
    }

    pub fn get(&self, id: &str) -> Option<&Labels> {
        self.items.get(id)
    }

    pub fn labels(&self, id: &str) -> Result<&Labels> {
        self.get(id)
            .ok_or_else(|| Error::Lookup(format!("image {id} not in attribute catalog")))
    }

    /// Items in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Labels)> {
        self.items.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.items.keys()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(IndexMap::from([
            ("Color".to_string(), vec!["Red ".to_string(), "black".to_string()]),
            ("sleeve".to_string(), vec!["long".to_string()]),
        ]))
        .unwrap()
    }

    #[test]
    fn values_are_canonicalized() {
        let s = schema();
        assert!(s.contains("color", "red"));
        assert_eq!(s.groups_with("long"), vec!["sleeve"]);
    }

    #[test]
    fn duplicate_values_rejected() {
        let r = Schema::new(IndexMap::from([(
            "c".to_string(),
            vec!["a".to_string(), " A".to_string()],
        )]));
        assert!(r.is_err());
    }

    #[test]
    fn unknown_value_is_vocabulary_error() {
        let mut c = AttributeCatalog::new(schema());
        let attrs = BTreeMap::from([("color".to_string(), vec!["green".to_string()])]);
        assert!(matches!(c.insert("x", &attrs), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut c = AttributeCatalog::new(schema());
        let attrs = BTreeMap::from([("color".to_string(), vec!["red".to_string()])]);
        c.insert("x", &attrs).unwrap();
        assert!(matches!(c.insert("x", &attrs), Err(Error::Data(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.jsonl");
        let mut c = AttributeCatalog::new(schema());
        c.insert(
            "a",
            &BTreeMap::from([
                ("color".to_string(), vec!["red".to_string()]),
                ("sleeve".to_string(), vec!["long".to_string()]),
            ]),
        )
        .unwrap();
        c.save(&path).unwrap();
        let back = AttributeCatalog::load(&path, Some(schema())).unwrap();
        assert_eq!(back, c);
    }
}
