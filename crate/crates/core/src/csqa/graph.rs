//! Scene graphs and cross-view pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewTag {
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "video")]
    Video,
    #[serde(rename = "3d")]
    Scene3d,
}

impl ViewTag {
    /// Noun phrase used in generated text.
    pub fn phrase(self) -> &'static str {
        match self {
            ViewTag::Image => "image",
            ViewTag::Video => "video",
            ViewTag::Scene3d => "3D scene",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    ImageVideo,
    Image3d,
}

impl PairKind {
    pub fn other_view(self) -> ViewTag {
        match self {
            PairKind::ImageVideo => ViewTag::Video,
            PairKind::Image3d => ViewTag::Scene3d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgObject {
    pub id: u32,
    pub label: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgRelation {
    pub subject_id: u32,
    pub predicate: String,
    pub object_id: u32,
    /// inclusive `[first, last]` frame span, video graphs only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<[u32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub view_tag: ViewTag,
    pub objects: Vec<SgObject>,
    #[serde(default)]
    pub relations: Vec<SgRelation>,
}

impl SceneGraph {
    pub fn object(&self, id: u32) -> Option<&SgObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.object(id).map(|o| o.label.as_str())
    }

    pub fn validate(&self, side: Side) -> Result<()> {
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(Error::Data(format!(
                    "{side} scene graph repeats object id {}",
                    o.id
                )));
            }
            if o.label.trim().is_empty() {
                return Err(Error::Data(format!(
                    "{side} object {} has an empty label",
                    o.id
                )));
            }
        }
        for r in &self.relations {
            for id in [r.subject_id, r.object_id] {
                if !ids.contains(&id) {
                    return Err(Error::Data(format!(
                        "{side} relation {:?} references missing object id {id}",
                        r.predicate
                    )));
                }
            }
            if let Some([a, b]) = r.frames {
                if a > b {
                    return Err(Error::Data(format!(
                        "{side} relation frame span [{a}, {b}] is reversed"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which graph of a pair an id belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Image,
    Other,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Image => "image",
            Side::Other => "other",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSceneGraph {
    pub image_sg: SceneGraph,
    pub other_sg: SceneGraph,
    /// image object id → other object id
    #[serde(default)]
    pub links: BTreeMap<u32, u32>,
    pub pair_kind: PairKind,
}

impl PairedSceneGraph {
    pub fn validate(&self) -> Result<()> {
        self.image_sg.validate(Side::Image)?;
        self.other_sg.validate(Side::Other)?;
        if self.image_sg.view_tag != ViewTag::Image {
            return Err(Error::Data("image_sg must carry view_tag \"image\"".into()));
        }
        if self.other_sg.view_tag != self.pair_kind.other_view() {
            return Err(Error::Data(format!(
                "other_sg view_tag {:?} does not match pair_kind {:?}",
                self.other_sg.view_tag, self.pair_kind
            )));
        }
        let mut targets = BTreeSet::new();
        for (&i, &o) in &self.links {
            if self.image_sg.object(i).is_none() {
                return Err(Error::Data(format!(
                    "dangling link: image object id {i} does not exist"
                )));
            }
            if self.other_sg.object(o).is_none() {
                return Err(Error::Data(format!(
                    "dangling link: other object id {o} does not exist"
                )));
            }
            if !targets.insert(o) {
                return Err(Error::Data(format!(
                    "link map is not injective: other object id {o} linked twice"
                )));
            }
        }
        Ok(())
    }

    pub fn other_view(&self) -> ViewTag {
        self.pair_kind.other_view()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pair: PairedSceneGraph = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
        pair.validate()?;
        Ok(pair)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PairedSceneGraph::from_json(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene graphs serialize")
    }

    /// Lowercased words of every label, predicate and attribute on both sides,
    /// plus frame numbers of video spans.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut v = BTreeSet::new();
        for sg in [&self.image_sg, &self.other_sg] {
            for o in &sg.objects {
                v.extend(words(&o.label));
                o.attributes.iter().for_each(|a| v.extend(words(a)));
            }
            for r in &sg.relations {
                v.extend(words(&r.predicate));
                if let Some(span) = r.frames {
                    v.extend(span.iter().map(u32::to_string));
                }
            }
        }
        v
    }
}

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const SYNTHETIC_LABELS: [&str; 12] = [
    "baby", "toy", "sofa", "ball", "adult", "child", "table", "chair", "cup", "dog", "lamp", "book",
];
pub const SYNTHETIC_PREDICATES: [&str; 8] = [
    "pushing",
    "holding",
    "near",
    "on",
    "in front of",
    "behind",
    "looking at",
    "touching",
];
pub const SYNTHETIC_ATTRIBUTES: [&str; 8] = [
    "red", "blue", "open", "closed", "moving", "still", "small", "large",
];

/// Seeded random pair with up to `max_objects` objects per side, partial
/// links and perturbed relations.
pub fn synthetic_pair(seed: u64, max_objects: usize) -> PairedSceneGraph {
    let mut rng = stream(seed, "csqa/synthetic");
    let kind = if rng.random_bool(0.5) {
        PairKind::ImageVideo
    } else {
        PairKind::Image3d
    };
    let max = max_objects.max(1);
    let graph = |view: ViewTag, base: u32, rng: &mut crate::rng::Rng| {
        let n = rng.random_range(1..=max);
        let objects: Vec<SgObject> = (0..n as u32)
            .map(|i| SgObject {
                id: base + i,
                label: SYNTHETIC_LABELS.choose(rng).expect("nonempty").to_string(),
                attributes: {
                    let k = rng.random_range(0..=2);
                    SYNTHETIC_ATTRIBUTES.choose_multiple(rng, k)
                }
                .map(|s| s.to_string())
                .collect(),
            })
            .collect();
        let n_rel = rng.random_range(0..=n * 2);
        let relations = (0..n_rel)
            .map(|_| {
                let s = objects.choose(rng).expect("nonempty").id;
                let o = objects.choose(rng).expect("nonempty").id;
                let frames = (view == ViewTag::Video).then(|| {
                    let a = rng.random_range(0..50);
                    [a, a + rng.random_range(0..50)]
                });
                SgRelation {
                    subject_id: s,
                    predicate: SYNTHETIC_PREDICATES
                        .choose(rng)
                        .expect("nonempty")
                        .to_string(),
                    object_id: o,
                    frames,
                }
            })
            .collect();
        SceneGraph {
            view_tag: view,
            objects,
            relations,
        }
    };
    let image_sg = graph(ViewTag::Image, 0, &mut rng);
    let mut other_sg = graph(kind.other_view(), 100, &mut rng);
    let mut other_ids: Vec<u32> = other_sg.objects.iter().map(|o| o.id).collect();
    other_ids.shuffle(&mut rng);
    let mut links = BTreeMap::new();
    for (img, oth) in image_sg.objects.iter().zip(other_ids) {
        if rng.random_bool(0.75) {
            links.insert(img.id, oth);
        }
    }
    // copy some image relations across so persistence and evolution occur
    for r in &image_sg.relations {
        if let (Some(&s), Some(&o)) = (links.get(&r.subject_id), links.get(&r.object_id)) {
            if rng.random_bool(0.6) {
                let predicate = if rng.random_bool(0.7) {
                    r.predicate.clone()
                } else {
                    SYNTHETIC_PREDICATES
                        .choose(&mut rng)
                        .expect("nonempty")
                        .to_string()
                };
                other_sg.relations.push(SgRelation {
                    subject_id: s,
                    predicate,
                    object_id: o,
                    frames: (kind == PairKind::ImageVideo).then_some([0, 10]),
                });
            }
        }
    }
    PairedSceneGraph {
        image_sg,
        other_sg,
        links,
        pair_kind: kind,
    }
}

/// Pair with `sg` on both sides under the proper view tags, fully linked.
pub fn identity_pair(sg: &SceneGraph, kind: PairKind) -> PairedSceneGraph {
    let mut image = sg.clone();
    image.view_tag = ViewTag::Image;
    let mut other = sg.clone();
    other.view_tag = kind.other_view();
    PairedSceneGraph {
        links: sg.objects.iter().map(|o| (o.id, o.id)).collect(),
        image_sg: image,
        other_sg: other,
        pair_kind: kind,
    }
}
