//! Single-label attribute changes and the relative captions that describe them.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Labels, Schema};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Change {
    /// Replace `from` by `to` within one group.
    Swap { group: String, from: String, to: String },
    /// Gain one label.
    Add { group: String, value: String },
    /// Lose one label.
    Remove { group: String, value: String },
}

impl fmt::Display for Change {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Change::Swap { group, from, to } => write!(f, "swap({group}: {from}->{to})"),
            Change::Add { group, value } => write!(f, "add({group}: {value})"),
            Change::Remove { group, value } => write!(f, "remove({group}: {value})"),
        }
    }
}

impl Change {
    pub fn group(&self) -> &str {
        match self {
            Change::Swap { group, .. } | Change::Add { group, .. } | Change::Remove { group, .. } => {
                group
            }
        }
    }

    pub fn is_applicable(&self, labels: &Labels) -> bool {
        let has = |g: &str, v: &str| labels.get(g).is_some_and(|s| s.contains(v));
        match self {
            Change::Swap { group, from, to } => has(group, from) && !has(group, to),
            Change::Add { group, value } => !has(group, value),
            Change::Remove { group, value } => has(group, value),
        }
    }

    /// Label set after the change; errors when the change does not apply.
    pub fn apply(&self, labels: &Labels) -> Result<Labels> {
        if !self.is_applicable(labels) {
            return Err(Error::Data(format!("change {self} does not apply to {labels:?}")));
        }
        let mut out = labels.clone();
        match self {
            Change::Swap { group, from, to } => {
                let set = out.get_mut(group).expect("checked above");
                set.remove(from);
                set.insert(to.clone());
            }
            Change::Add { group, value } => {
                out.entry(group.clone()).or_default().insert(value.clone());
            }
            Change::Remove { group, value } => {
                let set = out.get_mut(group).expect("checked above");
                set.remove(value);
                if set.is_empty() {
                    out.remove(group);
                }
            }
        }
        Ok(out)
    }

    /// Values that appear in the target but not the query (positive terms) and the
    /// reverse (negated terms).
    pub fn terms(&self) -> (Option<Term<'_>>, Option<Term<'_>>) {
        match self {
            Change::Swap { group, from, to } => (Some((group, to)), Some((group, from))),
            Change::Add { group, value } => (Some((group, value)), None),
            Change::Remove { group, value } => (None, Some((group, value))),
        }
    }
}

/// A `(group, value)` pair.
pub type Term<'a> = (&'a str, &'a str);

/// How "differ by exactly one label" is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// One value replaced by another within a group ("black not red").
    #[default]
    Swap,
    /// One label added or removed (literal one-element symmetric difference).
    Toggle,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swap" => Ok(SampleMode::Swap),
            "toggle" => Ok(SampleMode::Toggle),
            other => Err(Error::Config(format!("unknown sample mode {other}"))),
        }
    }
}

/// Every change of `mode` that is defined on `labels`, in schema order.
pub fn applicable_changes(schema: &Schema, labels: &Labels, mode: SampleMode) -> Vec<Change> {
    let empty = BTreeSet::new();
    let mut out = Vec::new();
    for (g, allowed) in &schema.groups {
        let present = labels.get(g).unwrap_or(&empty);
        match mode {
            SampleMode::Swap => {
                for a in present {
                    for b in allowed.iter().filter(|b| !present.contains(*b)) {
                        out.push(Change::Swap {
                            group: g.clone(),
                            from: a.clone(),
                            to: b.clone(),
                        });
                    }
                }
            }
            SampleMode::Toggle => {
                for b in allowed.iter().filter(|b| !present.contains(*b)) {
                    out.push(Change::Add {
                        group: g.clone(),
                        value: b.clone(),
                    });
                }
                for a in present {
                    out.push(Change::Remove {
                        group: g.clone(),
                        value: a.clone(),
                    });
                }
            }
        }
    }
    out
}

/// Caption templates per change kind. `{from}`, `{to}` and `{value}` are slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTemplates {
    pub swap: Vec<String>,
    pub add: Vec<String>,
    pub remove: Vec<String>,
}

impl Default for CaptionTemplates {
    fn default() -> Self {
        Self {
            swap: vec!["{to} not {from}".into()],
            add: vec!["with {value}".into()],
            remove: vec!["not {value}".into()],
        }
    }
}

impl CaptionTemplates {
    /// The default templates followed by paraphrases; the first entry of each list
    /// stays the default.
    pub fn with_paraphrases() -> Self {
        Self {
            swap: vec![
                "{to} not {from}".into(),
                "{to} instead of {from}".into(),
                "change {from} to {to}".into(),
                "make it {to} rather than {from}".into(),
            ],
            add: vec![
                "with {value}".into(),
                "add {value}".into(),
                "has {value}".into(),
                "make it have {value}".into(),
            ],
            remove: vec![
                "not {value}".into(),
                "without {value}".into(),
                "remove {value}".into(),
                "no {value}".into(),
            ],
        }
    }

    fn for_change(&self, change: &Change) -> &[String] {
        match change {
            Change::Swap { .. } => &self.swap,
            Change::Add { .. } => &self.add,
            Change::Remove { .. } => &self.remove,
        }
    }
}

fn render(template: &str, change: &Change) -> String {
    match change {
        Change::Swap { from, to, .. } => template.replace("{from}", from).replace("{to}", to),
        Change::Add { value, .. } | Change::Remove { value, .. } => {
            template.replace("{value}", value)
        }
    }
}

/// Renders a caption with the `index`-th template for this change kind.
pub fn render_caption(change: &Change, templates: &CaptionTemplates, index: usize) -> Result<String> {
    let list = templates.for_change(change);
    let t = list
        .get(index)
        .ok_or_else(|| Error::Config(format!("no caption template #{index} for {change}")))?;
    Ok(render(t, change))
}

/// Renders a caption, picking among the available templates with `rng` when there
/// is more than one.
pub fn generate_caption(change: &Change, templates: &CaptionTemplates, rng: &mut impl Rng) -> String {
    let list = templates.for_change(change);
    assert!(!list.is_empty(), "empty template list");
    let idx = if list.len() == 1 {
        0
    } else {
        rng.random_range(0..list.len())
    };
    render(&list[idx], change)
}

#[derive(Debug)]
enum Piece<'a> {
    Lit(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        if start > 0 {
            out.push(Piece::Lit(&rest[..start]));
        }
        let end = rest[start..].find('}').map(|e| start + e).unwrap_or(rest.len() - 1);
        out.push(Piece::Slot(&rest[start + 1..end]));
        rest = &rest[end + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Lit(rest));
    }
    out
}

fn match_pieces<'t>(
    ps: &[Piece<'_>],
    text: &'t str,
    vocab: &BTreeSet<&str>,
    bound: &mut Vec<(String, &'t str)>,
) -> bool {
    match ps.split_first() {
        None => text.is_empty(),
        Some((Piece::Lit(l), rest)) => {
            text.starts_with(l) && match_pieces(rest, &text[l.len()..], vocab, bound)
        }
        Some((Piece::Slot(name), rest)) => {
            for end in (1..=text.len()).rev() {
                if !text.is_char_boundary(end) {
                    continue;
                }
                let cand = &text[..end];
                if !vocab.contains(cand) {
                    continue;
                }
                bound.push((name.to_string(), cand));
                if match_pieces(rest, &text[end..], vocab, bound) {
                    return true;
                }
                bound.pop();
            }
            false
        }
    }
}

fn unique_group<'s>(schema: &'s Schema, value: &str) -> Result<&'s str> {
    match schema.groups_with(value).as_slice() {
        [g] => Ok(g),
        [] => Err(Error::Vocabulary(format!("value {value} not in schema"))),
        many => Err(Error::Vocabulary(format!(
            "value {value} is ambiguous between groups {many:?}"
        ))),
    }
}

/// Recovers the change a caption describes by matching it against `templates`.
pub fn parse_caption(text: &str, schema: &Schema, templates: &CaptionTemplates) -> Result<Change> {
    let text = text.trim().to_lowercase();
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let vocab = schema.all_values();
    let kinds: [(&[String], u8); 3] = [(&templates.swap, 0), (&templates.add, 1), (&templates.remove, 2)];
    for (list, kind) in kinds {
        for t in list {
            let ps = pieces(t);
            let mut bound = Vec::new();
            if !match_pieces(&ps, &text, &vocab, &mut bound) {
                continue;
            }
            let get = |k: &str| bound.iter().find(|(n, _)| n == k).map(|(_, v)| v.to_string());
            match kind {
                0 => {
                    let (Some(from), Some(to)) = (get("from"), get("to")) else {
                        continue;
                    };
                    let groups: Vec<&str> = schema
                        .groups
                        .iter()
                        .filter(|(_, vs)| vs.contains(&from) && vs.contains(&to))
                        .map(|(g, _)| g.as_str())
                        .collect();
                    return match groups.as_slice() {
                        [g] => Ok(Change::Swap {
                            group: g.to_string(),
                            from,
                            to,
                        }),
                        [] => Err(Error::Vocabulary(format!(
                            "no group holds both {from} and {to}"
                        ))),
                        many => Err(Error::Vocabulary(format!(
                            "swap {from}->{to} is ambiguous between groups {many:?}"
                        ))),
                    };
                }
                _ => {
                    let Some(value) = get("value") else { continue };
                    let group = unique_group(schema, &value)?.to_string();
                    return Ok(if kind == 1 {
                        Change::Add { group, value }
                    } else {
                        Change::Remove { group, value }
                    });
                }
            }
        }
    }
    Err(Error::Vocabulary(format!("caption {text:?} matches no template")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;
    use rand::SeedableRng;

    fn schema() -> Schema {
        Schema::new(IndexMap::from([
            ("color".to_string(), vec!["red".into(), "black".into(), "light blue".into()]),
            ("pattern".to_string(), vec!["floral".into(), "solid".into()]),
            ("material".to_string(), vec!["lace".into(), "cotton".into()]),
        ]))
        .unwrap()
    }

    fn rng() -> crate::rng::Rng {
        crate::rng::Rng::seed_from_u64(0)
    }

    #[test]
    fn default_caption_examples() {
        let t = CaptionTemplates::default();
        let swap = Change::Swap {
            group: "color".into(),
            from: "red".into(),
            to: "black".into(),
        };
        assert_eq!(generate_caption(&swap, &t, &mut rng()), "black not red");
        let rm = Change::Remove {
            group: "pattern".into(),
            value: "floral".into(),
        };
        assert_eq!(generate_caption(&rm, &t, &mut rng()), "not floral");
        let add = Change::Add {
            group: "material".into(),
            value: "lace".into(),
        };
        assert_eq!(generate_caption(&add, &t, &mut rng()), "with lace");
    }

    #[test]
    fn parse_inverts_every_template() {
        let s = schema();
        let t = CaptionTemplates::with_paraphrases();
        let changes = [
            Change::Swap {
                group: "color".into(),
                from: "light blue".into(),
                to: "red".into(),
            },
            Change::Add {
                group: "pattern".into(),
                value: "solid".into(),
            },
            Change::Remove {
                group: "material".into(),
                value: "cotton".into(),
            },
        ];
        for c in &changes {
            for i in 0..4 {
                let text = render_caption(c, &t, i).unwrap();
                assert_eq!(&parse_caption(&text, &s, &t).unwrap(), c, "{text}");
            }
        }
    }

    #[test]
    fn unknown_caption_is_vocabulary_error() {
        let s = schema();
        let t = CaptionTemplates::default();
        assert!(matches!(
            parse_caption("green not red", &s, &t),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(
            parse_caption("is longer", &s, &t),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn apply_swap_substitutes() {
        let labels: Labels = [
            ("color".to_string(), ["red".to_string()].into()),
            ("sleeve".to_string(), ["long".to_string()].into()),
        ]
        .into();
        let c = Change::Swap {
            group: "color".into(),
            from: "red".into(),
            to: "black".into(),
        };
        let out = c.apply(&labels).unwrap();
        assert_eq!(out["color"], ["black".to_string()].into());
        assert_eq!(out["sleeve"], ["long".to_string()].into());
        let back = Change::Swap {
            group: "color".into(),
            from: "red".into(),
            to: "black".into(),
        };
        assert!(back.apply(&out).is_err());
    }

    #[test]
    fn removing_last_value_drops_group() {
        let labels: Labels = [("color".to_string(), ["red".to_string()].into())].into();
        let c = Change::Remove {
            group: "color".into(),
            value: "red".into(),
        };
        assert!(c.apply(&labels).unwrap().is_empty());
    }

    #[test]
    fn applicable_changes_per_mode() {
        let s = schema();
        let labels: Labels = [("color".to_string(), ["red".to_string()].into())].into();
        let swaps = applicable_changes(&s, &labels, SampleMode::Swap);
        assert_eq!(swaps.len(), 2);
        let toggles = applicable_changes(&s, &labels, SampleMode::Toggle);
        // 2 color adds + 1 remove + 2 pattern adds + 2 material adds
        assert_eq!(toggles.len(), 7);
    }
}
