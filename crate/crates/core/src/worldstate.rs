//! The shared city: world objects, the declarative effect map, and the
//! deltas an answered dilemma applies to the world.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Dilemma, DilemmaCatalog, IdeologyCategory};

pub const EFFECT_HEADER: [&str; 6] = [
    "dilemma_id",
    "category",
    "object_id",
    "enable",
    "add_tags",
    "remove_tags",
];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("no effect defined for dilemma {dilemma_id} / {category}")]
    NoEffectDefined {
        dilemma_id: u32,
        category: IdeologyCategory,
    },
    #[error("category {category} does not belong to the group of dilemma {dilemma_id}")]
    WrongGroup {
        dilemma_id: u32,
        category: IdeologyCategory,
    },
    #[error("unknown world object `{0}`")]
    UnknownObject(String),
    #[error("effect map header does not match `{}`", EFFECT_HEADER.join(","))]
    MalformedHeader,
    #[error("effect map row {row}: {reason}")]
    BadRow { row: u64, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldObject {
    pub object_id: String,
    pub enabled: bool,
    pub variant_tags: BTreeSet<String>,
    pub venue: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectChange {
    pub object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub add_tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub remove_tags: BTreeSet<String>,
}

impl ObjectChange {
    /// The change that undoes `self` when applied to the object state `before`.
    pub fn inverse(&self, before: &WorldObject) -> ObjectChange {
        ObjectChange {
            object_id: self.object_id.clone(),
            enable: self.enable.map(|_| before.enabled),
            add_tags: self
                .remove_tags
                .iter()
                .filter(|t| before.variant_tags.contains(*t))
                .cloned()
                .collect(),
            remove_tags: self
                .add_tags
                .iter()
                .filter(|t| !before.variant_tags.contains(*t))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDelta {
    pub dilemma_id: u32,
    pub category: IdeologyCategory,
    pub changes: Vec<ObjectChange>,
}

/// Object states keyed (and therefore serialized) in `object_id` order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<String, WorldObject>,
    pub version: u64,
}

impl WorldState {
    pub fn new(objects: impl IntoIterator<Item = WorldObject>) -> Self {
        Self {
            objects: objects
                .into_iter()
                .map(|o| (o.object_id.clone(), o))
                .collect(),
            version: 0,
        }
    }

    /// Returns the state after `delta`; `self` is left untouched.
    pub fn apply_delta(&self, delta: &SceneDelta) -> Result<WorldState, WorldError> {
        let mut next = self.clone();
        next.apply_in_place(delta)?;
        Ok(next)
    }

    /// Applies `delta` to `self`. Fails without mutating anything when an
    /// object is missing.
    pub fn apply_in_place(&mut self, delta: &SceneDelta) -> Result<(), WorldError> {
        if let Some(missing) = delta
            .changes
            .iter()
            .find(|c| !self.objects.contains_key(&c.object_id))
        {
            return Err(WorldError::UnknownObject(missing.object_id.clone()));
        }
        for change in &delta.changes {
            let object = self
                .objects
                .get_mut(&change.object_id)
                .expect("checked above");
            if let Some(enabled) = change.enable {
                object.enabled = enabled;
            }
            for tag in &change.remove_tags {
                object.variant_tags.remove(tag);
            }
            object.variant_tags.extend(change.add_tags.iter().cloned());
        }
        self.version += 1;
        Ok(())
    }

    /// Canonical bytes: objects by id, tags sorted. Equal states give equal bytes.
    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("world state always serializes")
    }

    /// The delta that restores the fields `delta` would change.
    pub fn inverse_of(&self, delta: &SceneDelta) -> Result<SceneDelta, WorldError> {
        let mut scratch = self.clone();
        let mut changes = Vec::with_capacity(delta.changes.len());
        for c in &delta.changes {
            let before = scratch
                .objects
                .get(&c.object_id)
                .ok_or_else(|| WorldError::UnknownObject(c.object_id.clone()))?;
            changes.push(c.inverse(before));
            scratch.apply_in_place(&SceneDelta {
                dilemma_id: delta.dilemma_id,
                category: delta.category,
                changes: vec![c.clone()],
            })?;
        }
        changes.reverse();
        Ok(SceneDelta {
            dilemma_id: delta.dilemma_id,
            category: delta.category,
            changes,
        })
    }
}

/// `(dilemma, category) → changes`, loaded from the effect-map fixture.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EffectMap {
    entries: BTreeMap<(u32, IdeologyCategory), Vec<ObjectChange>>,
}

impl EffectMap {
    pub fn insert(&mut self, dilemma_id: u32, category: IdeologyCategory, change: ObjectChange) {
        self.entries
            .entry((dilemma_id, category))
            .or_default()
            .push(change);
    }

    pub fn get(&self, dilemma_id: u32, category: IdeologyCategory) -> Option<&[ObjectChange]> {
        self.entries
            .get(&(dilemma_id, category))
            .map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = (u32, IdeologyCategory)> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every object id referenced by any entry.
    pub fn object_ids(&self) -> BTreeSet<&str> {
        self.entries
            .values()
            .flatten()
            .map(|c| c.object_id.as_str())
            .collect()
    }

    /// All referenced objects, disabled and untagged. Each object takes the
    /// venue of the first dilemma (by id) that touches it.
    pub fn initial_world(&self, catalog: &DilemmaCatalog) -> WorldState {
        let mut objects: BTreeMap<String, WorldObject> = BTreeMap::new();
        for ((dilemma_id, _), changes) in &self.entries {
            let venue = catalog
                .get(*dilemma_id)
                .map(|d| d.venue.clone())
                .unwrap_or_default();
            for c in changes {
                objects
                    .entry(c.object_id.clone())
                    .or_insert_with(|| WorldObject {
                        object_id: c.object_id.clone(),
                        enabled: false,
                        variant_tags: BTreeSet::new(),
                        venue: venue.clone(),
                    });
            }
        }
        WorldState {
            objects,
            version: 0,
        }
    }
}

fn split_tags(field: &str) -> BTreeSet<String> {
    field
        .split('|')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_effect_map<R: Read>(source: R) -> Result<EffectMap, WorldError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = reader.records();
    let header = records.next().ok_or(WorldError::MalformedHeader)??;
    if header.iter().ne(EFFECT_HEADER.iter().copied()) {
        return Err(WorldError::MalformedHeader);
    }
    let mut map = EffectMap::default();
    for record in records {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: String| WorldError::BadRow { row, reason };
        if record.len() != EFFECT_HEADER.len() {
            return Err(bad(format!("expected 6 fields, found {}", record.len())));
        }
        let dilemma_id: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad dilemma_id `{}`", &record[0])))?;
        let category = IdeologyCategory::from_label(record[1].trim())
            .ok_or_else(|| bad(format!("unknown category `{}`", &record[1])))?;
        let object_id = record[2].trim();
        if object_id.is_empty() {
            return Err(bad("empty object_id".into()));
        }
        let enable = match record[3].trim() {
            "" => None,
            "true" | "1" => Some(true),
            "false" | "0" => Some(false),
            other => return Err(bad(format!("bad enable `{other}`"))),
        };
        map.insert(
            dilemma_id,
            category,
            ObjectChange {
                object_id: object_id.to_string(),
                enable,
                add_tags: split_tags(&record[4]),
                remove_tags: split_tags(&record[5]),
            },
        );
    }
    Ok(map)
}

pub fn derive_delta(
    dilemma: &Dilemma,
    category: IdeologyCategory,
    effects: &EffectMap,
) -> Result<SceneDelta, WorldError> {
    if category.group() != dilemma.group {
        return Err(WorldError::WrongGroup {
            dilemma_id: dilemma.dilemma_id,
            category,
        });
    }
    let changes = effects
        .get(dilemma.dilemma_id, category)
        .filter(|c| !c.is_empty())
        .ok_or(WorldError::NoEffectDefined {
            dilemma_id: dilemma.dilemma_id,
            category,
        })?;
    Ok(SceneDelta {
        dilemma_id: dilemma.dilemma_id,
        category,
        changes: changes.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Group;

    fn dilemma(id: u32, group: Group) -> Dilemma {
        Dilemma {
            dilemma_id: id,
            group,
            venue: "SQUARE".into(),
            level: 1,
            prompt: "p".into(),
            options: std::array::from_fn(|i| format!("o{i}")),
        }
    }

    fn world() -> WorldState {
        WorldState::new(["fence_01", "tower_02"].map(|id| WorldObject {
            object_id: id.into(),
            enabled: false,
            variant_tags: BTreeSet::new(),
            venue: "SQUARE".into(),
        }))
    }

    fn conservatism() -> IdeologyCategory {
        IdeologyCategory::from_label("Conservatism").unwrap()
    }

    #[test]
    fn lookup_enables_fence() {
        let src = "dilemma_id,category,object_id,enable,add_tags,remove_tags\n\
                   3,Conservatism,fence_01,true,stone|tall,\n";
        let effects = parse_effect_map(src.as_bytes()).unwrap();
        let delta = derive_delta(&dilemma(3, Group::A), conservatism(), &effects).unwrap();
        assert_eq!(delta.changes.len(), 1);
        assert_eq!(delta.changes[0].object_id, "fence_01");
        assert_eq!(delta.changes[0].enable, Some(true));
        assert_eq!(delta.changes[0].add_tags.len(), 2);
    }

    #[test]
    fn wrong_group_and_missing_effect() {
        let effects = EffectMap::default();
        let realism = IdeologyCategory::from_label("Realism").unwrap();
        assert!(matches!(
            derive_delta(&dilemma(3, Group::A), realism, &effects),
            Err(WorldError::WrongGroup { .. })
        ));
        assert!(matches!(
            derive_delta(&dilemma(3, Group::A), conservatism(), &effects),
            Err(WorldError::NoEffectDefined { .. })
        ));
    }

    #[test]
    fn toggle_touches_one_object() {
        let w = world();
        let delta = SceneDelta {
            dilemma_id: 1,
            category: conservatism(),
            changes: vec![ObjectChange {
                object_id: "fence_01".into(),
                enable: Some(true),
                add_tags: BTreeSet::new(),
                remove_tags: BTreeSet::new(),
            }],
        };
        let next = w.apply_delta(&delta).unwrap();
        assert_eq!(w.version, 0);
        assert_eq!(next.version, 1);
        assert!(next.objects["fence_01"].enabled);
        assert_eq!(next.objects["tower_02"], w.objects["tower_02"]);
    }

    #[test]
    fn inverse_restores_fields() {
        let w = world();
        let delta = SceneDelta {
            dilemma_id: 1,
            category: conservatism(),
            changes: vec![ObjectChange {
                object_id: "tower_02".into(),
                enable: Some(true),
                add_tags: ["glass".to_string()].into(),
                remove_tags: BTreeSet::new(),
            }],
        };
        let inverse = w.inverse_of(&delta).unwrap();
        let back = w.apply_delta(&delta).unwrap().apply_delta(&inverse).unwrap();
        assert_eq!(back.objects, w.objects);
        assert_eq!(back.version, 2);
    }

    #[test]
    fn unknown_object_is_error_and_no_mutation() {
        let mut w = world();
        let delta = SceneDelta {
            dilemma_id: 1,
            category: conservatism(),
            changes: vec![
                ObjectChange {
                    object_id: "fence_01".into(),
                    enable: Some(true),
                    add_tags: BTreeSet::new(),
                    remove_tags: BTreeSet::new(),
                },
                ObjectChange {
                    object_id: "ghost".into(),
                    enable: None,
                    add_tags: BTreeSet::new(),
                    remove_tags: BTreeSet::new(),
                },
            ],
        };
        let before = w.clone();
        assert!(matches!(
            w.apply_in_place(&delta),
            Err(WorldError::UnknownObject(id)) if id == "ghost"
        ));
        assert_eq!(w, before);
    }

    #[test]
    fn snapshot_distinguishes_tags() {
        let a = world();
        let mut b = world();
        assert_eq!(a.snapshot(), a.snapshot());
        assert_eq!(a.snapshot(), b.snapshot());
        b.objects.get_mut("fence_01").unwrap().variant_tags.insert("x".into());
        assert_ne!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn initial_world_collects_objects() {
        let src = "dilemma_id,category,object_id,enable,add_tags,remove_tags\n\
                   3,Conservatism,fence_01,true,,\n\
                   3,Nihilism,tower_02,,graffiti,\n";
        let effects = parse_effect_map(src.as_bytes()).unwrap();
        let catalog = DilemmaCatalog::new(vec![dilemma(3, Group::A)]).unwrap();
        let w = effects.initial_world(&catalog);
        assert_eq!(w.objects.len(), 2);
        assert!(w.objects.values().all(|o| !o.enabled && o.venue == "SQUARE"));
    }

    #[test]
    fn malformed_effect_rows() {
        assert!(matches!(
            parse_effect_map("a,b\n".as_bytes()),
            Err(WorldError::MalformedHeader)
        ));
        let src = "dilemma_id,category,object_id,enable,add_tags,remove_tags\n3,Nope,x,,,\n";
        assert!(matches!(
            parse_effect_map(src.as_bytes()),
            Err(WorldError::BadRow { row: 2, .. })
        ));
    }
}
