//! Structural diff of a scene-graph pair.
//!
//! Image relations are translated into other-side ids through the link map
//! and then compared as `(subject, predicate, object)` triples.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::graph::PairedSceneGraph;
use crate::error::Result;

/// `(subject_id, predicate, object_id)` in other-side ids.
pub type Triple = (u32, String, u32);

/// Same `(subject, object)` pair, different predicate.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ChangedRelation {
    pub subject_id: u32,
    pub object_id: u32,
    pub image_predicate: String,
    pub other_predicate: String,
}

/// Image relation with no counterpart on the other side, in image ids.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct VanishedRelation {
    pub subject_id: u32,
    pub predicate: String,
    pub object_id: u32,
    /// whether both endpoints are linked to the other side
    pub translatable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SceneDiff {
    /// image object ids without a link
    pub unmatched_image_objects: Vec<u32>,
    /// other object ids no image object links to
    pub unmatched_other_objects: Vec<u32>,
    /// linked image ids whose attribute sets differ across views
    pub changed_attributes: Vec<u32>,
    pub persistent_relations: BTreeSet<Triple>,
    pub changed_relations: BTreeSet<ChangedRelation>,
    pub new_relations: BTreeSet<Triple>,
    pub vanished_relations: BTreeSet<VanishedRelation>,
}

impl SceneDiff {
    pub fn is_identity(&self) -> bool {
        self.unmatched_image_objects.is_empty()
            && self.unmatched_other_objects.is_empty()
            && self.changed_attributes.is_empty()
            && self.changed_relations.is_empty()
            && self.new_relations.is_empty()
            && self.vanished_relations.is_empty()
    }
}

fn predicates_by_pair<'a>(
    triples: impl Iterator<Item = &'a Triple>,
) -> BTreeMap<(u32, u32), BTreeSet<&'a str>> {
    let mut m: BTreeMap<(u32, u32), BTreeSet<&str>> = BTreeMap::new();
    for (s, p, o) in triples {
        m.entry((*s, *o)).or_default().insert(p.as_str());
    }
    m
}

pub fn diff_graphs(pair: &PairedSceneGraph) -> Result<SceneDiff> {
    pair.validate()?;
    let img = &pair.image_sg;
    let oth = &pair.other_sg;
    let linked_targets: BTreeSet<u32> = pair.links.values().copied().collect();

    let unmatched_image_objects = img
        .objects
        .iter()
        .map(|o| o.id)
        .filter(|id| !pair.links.contains_key(id))
        .collect();
    let unmatched_other_objects = oth
        .objects
        .iter()
        .map(|o| o.id)
        .filter(|id| !linked_targets.contains(id))
        .collect();
    let changed_attributes = img
        .objects
        .iter()
        .filter_map(|o| {
            let other = oth.object(*pair.links.get(&o.id)?)?;
            let a: BTreeSet<&String> = o.attributes.iter().collect();
            let b: BTreeSet<&String> = other.attributes.iter().collect();
            (a != b).then_some(o.id)
        })
        .collect();

    let mut translated: BTreeSet<Triple> = BTreeSet::new();
    let mut untranslatable = BTreeSet::new();
    for r in &img.relations {
        match (pair.links.get(&r.subject_id), pair.links.get(&r.object_id)) {
            (Some(&s), Some(&o)) => {
                translated.insert((s, r.predicate.clone(), o));
            }
            _ => {
                untranslatable.insert(VanishedRelation {
                    subject_id: r.subject_id,
                    predicate: r.predicate.clone(),
                    object_id: r.object_id,
                    translatable: false,
                });
            }
        }
    }
    let other: BTreeSet<Triple> = oth
        .relations
        .iter()
        .map(|r| (r.subject_id, r.predicate.clone(), r.object_id))
        .collect();

    let persistent_relations: BTreeSet<Triple> = translated.intersection(&other).cloned().collect();
    let img_pairs = predicates_by_pair(translated.iter());
    let oth_pairs = predicates_by_pair(other.iter());
    let mut changed_relations = BTreeSet::new();
    let mut changed_pairs = BTreeSet::new();
    for (key, ip) in &img_pairs {
        let Some(op) = oth_pairs.get(key) else {
            continue;
        };
        let only_img: Vec<&str> = ip.difference(op).copied().collect();
        let only_oth: Vec<&str> = op.difference(ip).copied().collect();
        if only_img.is_empty() || only_oth.is_empty() {
            continue;
        }
        changed_pairs.insert(*key);
        for a in &only_img {
            for b in &only_oth {
                changed_relations.insert(ChangedRelation {
                    subject_id: key.0,
                    object_id: key.1,
                    image_predicate: a.to_string(),
                    other_predicate: b.to_string(),
                });
            }
        }
    }
    let new_relations = other
        .difference(&translated)
        .filter(|(s, _, o)| !changed_pairs.contains(&(*s, *o)))
        .cloned()
        .collect();

    let back: BTreeMap<u32, u32> = pair.links.iter().map(|(i, o)| (*o, *i)).collect();
    let mut vanished_relations = untranslatable;
    for (s, p, o) in translated.difference(&other) {
        if changed_pairs.contains(&(*s, *o)) {
            continue;
        }
        vanished_relations.insert(VanishedRelation {
            subject_id: back[s],
            predicate: p.clone(),
            object_id: back[o],
            translatable: true,
        });
    }

    Ok(SceneDiff {
        unmatched_image_objects,
        unmatched_other_objects,
        changed_attributes,
        persistent_relations,
        changed_relations,
        new_relations,
        vanished_relations,
    })
}
