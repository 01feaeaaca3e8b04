//! Cross-view question answering pairs generated from scene-graph diffs.
//!
//! A pair of scene graphs (an image and a video or 3D scene, with object
//! links between them) is diffed structurally. Every diff item is rendered
//! through a seeded choice from a small template bank, and a grounding
//! validator checks that answers only use words the graphs or templates
//! supply.

mod diff;
mod generate;
mod graph;
mod jsonl;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diff::{diff_graphs, ChangedRelation, SceneDiff, Triple, VanishedRelation};
pub use generate::{
    gen_object_qa, gen_relation_qa, generate_pair, interleave_capped, DEFAULT_PAIR_CAP,
};
pub use graph::{
    identity_pair, synthetic_pair, words, PairKind, PairedSceneGraph, SceneGraph, SgObject,
    SgRelation, Side, ViewTag,
};
pub use jsonl::{emit_jsonl, read_jsonl, to_jsonl};
pub use validate::{template_vocabulary, validate_qa, RejectReason, Verdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Object,
    Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Appearance,
    Disappearance,
    Motion,
    StateChange,
    NewObject,
    Persistence,
    Emergence,
    Evolution,
}

impl Category {
    /// Every category except persistence reports a change between views.
    pub fn is_change(self) -> bool {
        self != Category::Persistence
    }

    pub fn level(self) -> Level {
        match self {
            Category::Persistence | Category::Emergence | Category::Evolution => Level::Relation,
            _ => Level::Object,
        }
    }
}

/// An object id on one side of a pair, written `image:3` or `other:12`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectRef {
    pub side: Side,
    pub id: u32,
}

impl ObjectRef {
    pub fn image(id: u32) -> Self {
        ObjectRef {
            side: Side::Image,
            id,
        }
    }

    pub fn other(id: u32) -> Self {
        ObjectRef {
            side: Side::Other,
            id,
        }
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.side, self.id)
    }
}

impl FromStr for ObjectRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("invalid object reference {s:?}"));
        let (side, id) = s.split_once(':').ok_or_else(bad)?;
        let side = match side {
            "image" => Side::Image,
            "other" => Side::Other,
            _ => return Err(bad()),
        };
        Ok(ObjectRef {
            side,
            id: id.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for ObjectRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ObjectRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub level: Level,
    pub category: Category,
    pub provenance: Vec<ObjectRef>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baby_toy() -> PairedSceneGraph {
        PairedSceneGraph::from_json(include_str!("../../tests/fixtures/baby_toy.json")).unwrap()
    }

    #[test]
    fn new_object_question_names_the_ball() {
        let qa = gen_object_qa(&baby_toy(), 7).unwrap();
        let new: Vec<_> = qa
            .iter()
            .filter(|q| q.category == Category::NewObject)
            .collect();
        assert_eq!(new.len(), 1);
        assert_eq!(
            new[0].question,
            "Does any new object appear in the video that is not in the image?"
        );
        let w = words(&new[0].answer);
        assert!(w.contains(&"ball".to_string()), "{}", new[0].answer);
        assert!(w.contains(&"adult".to_string()), "{}", new[0].answer);
    }

    #[test]
    fn predicate_change_is_one_evolution_qa() {
        let qa = gen_relation_qa(&baby_toy(), 7).unwrap();
        let evo: Vec<_> = qa
            .iter()
            .filter(|q| q.category == Category::Evolution)
            .collect();
        assert_eq!(evo.len(), 1);
        let w = words(&evo[0].answer);
        assert!(w.contains(&"pushing".to_string()) && w.contains(&"holding".to_string()));
        let emergence = qa
            .iter()
            .filter(|q| q.category == Category::Emergence)
            .count();
        assert_eq!(emergence, 1);
    }

    #[test]
    fn both_levels_are_generated() {
        let qa = generate_pair(&baby_toy(), 1).unwrap();
        assert!(qa.iter().any(|q| q.level == Level::Object));
        assert!(qa.iter().any(|q| q.level == Level::Relation));
        for q in &qa {
            assert_eq!(q.level, q.category.level());
        }
    }

    #[test]
    fn identity_pair_only_persists() {
        let p = identity_pair(&baby_toy().other_sg, PairKind::ImageVideo);
        assert!(diff_graphs(&p).unwrap().is_identity());
        assert!(gen_object_qa(&p, 3).unwrap().is_empty());
        let rel = gen_relation_qa(&p, 3).unwrap();
        assert_eq!(rel.len(), p.image_sg.relations.len());
        assert!(rel.iter().all(|q| q.category == Category::Persistence));
    }

    #[test]
    fn unlinked_object_is_unmatched() {
        let mut p = identity_pair(&baby_toy().image_sg, PairKind::ImageVideo);
        p.other_sg.objects.push(SgObject {
            id: 99,
            label: "ball".into(),
            attributes: vec![],
        });
        let d = diff_graphs(&p).unwrap();
        assert_eq!(d.unmatched_other_objects, vec![99]);
        assert!(d.unmatched_image_objects.is_empty());
    }

    #[test]
    fn generated_qas_are_grounded() {
        for seed in 0..50 {
            let p = synthetic_pair(seed, 10);
            for qa in generate_pair(&p, seed).unwrap() {
                assert_eq!(validate_qa(&p, &qa), Verdict::Accept, "{qa:?}");
            }
        }
    }

    #[test]
    fn unicorn_is_ungrounded() {
        let p = baby_toy();
        let qa = QAPair {
            question: "What is on the sofa?".into(),
            answer: "A unicorn is on the sofa.".into(),
            level: Level::Object,
            category: Category::Appearance,
            provenance: vec![ObjectRef::image(2)],
        };
        let v = validate_qa(&p, &qa);
        assert_eq!(
            v,
            Verdict::Reject(RejectReason::UngroundedLabel("unicorn".into()))
        );
        if let Verdict::Reject(r) = v {
            assert!(r.to_string().starts_with("ungrounded label"));
        }
    }

    #[test]
    fn unknown_provenance_is_rejected() {
        let qa = QAPair {
            question: "Is the baby there?".into(),
            answer: "Yes, the baby is on the sofa.".into(),
            level: Level::Object,
            category: Category::Persistence,
            provenance: vec![ObjectRef::other(42)],
        };
        assert!(matches!(
            validate_qa(&baby_toy(), &qa),
            Verdict::Reject(RejectReason::UnknownProvenance(_))
        ));
    }

    #[test]
    fn dangling_link_names_the_id() {
        let mut p = baby_toy();
        p.links.insert(7, 10);
        let e = diff_graphs(&p).unwrap_err().to_string();
        assert!(e.contains('7'), "{e}");
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let p = synthetic_pair(5, 10);
        assert_eq!(generate_pair(&p, 9).unwrap(), generate_pair(&p, 9).unwrap());
    }

    #[test]
    fn object_ref_round_trips() {
        for r in [ObjectRef::image(3), ObjectRef::other(12)] {
            assert_eq!(r.to_string().parse::<ObjectRef>().unwrap(), r);
        }
        assert!("video:1".parse::<ObjectRef>().is_err());
    }

    #[test]
    fn jsonl_line_for_baby_toy() {
        let qa = gen_object_qa(&baby_toy(), 7).unwrap();
        let text = to_jsonl(&qa);
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(
            "{\"question\":\"Does any new object appear in the video that is not in the image?\",\"answer\":"
        ));
        assert!(to_jsonl(&[]).is_empty());
    }

    #[test]
    fn interleave_keeps_both_levels() {
        let p = baby_toy();
        let o = gen_object_qa(&p, 0).unwrap();
        let r = gen_relation_qa(&p, 0).unwrap();
        let mixed = interleave_capped(o, r, 2);
        assert_eq!(mixed.len(), 2);
        assert_eq!(mixed[0].level, Level::Object);
        assert_eq!(mixed[1].level, Level::Relation);
    }
}
