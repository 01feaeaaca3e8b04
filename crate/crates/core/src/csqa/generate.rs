//! Template rendering of diff items.

use super::diff::{diff_graphs, SceneDiff};
use super::graph::{PairedSceneGraph, ViewTag};
use super::{Category, ObjectRef, QAPair};
use crate::error::Result;
use crate::rng::fnv1a;

pub const DEFAULT_PAIR_CAP: usize = 8;

/// `(question, answer)` templates. Placeholders are `{name}`.
pub(super) type Form = (&'static str, &'static str);

pub(super) const NEW_OBJECT_QUESTION: &str =
    "Does any new object appear in the {view} that is not in the image?";

pub(super) const NEW_OBJECT: [Form; 3] = [
    (
        NEW_OBJECT_QUESTION,
        "Yes, {objects} can be seen in the {view} but not in the image.",
    ),
    (NEW_OBJECT_QUESTION, "Yes, the {view} adds {objects}."),
    (
        NEW_OBJECT_QUESTION,
        "Yes. Unlike the image, the {view} shows {objects}.",
    ),
];

pub(super) const APPEARANCE: [Form; 3] = [
    (
        "Is the {label} in the {view} also visible in the image?",
        "No, the {label} appears only in the {view}{span}.",
    ),
    (
        "Where does the {label} in the {view} come from?",
        "The {label} is not in the image; it shows up in the {view}{span}.",
    ),
    (
        "When does the {label} first appear?",
        "The {label} first appears in the {view}{span}, not in the image.",
    ),
];

pub(super) const DISAPPEARANCE: [Form; 3] = [
    (
        "Is the {label} from the image still present in the {view}?",
        "No, the {label} does not appear in the {view}.",
    ),
    (
        "What happens to the {label} seen in the image?",
        "The {label} is missing from the {view}.",
    ),
    (
        "Can the {label} in the image be found in the {view}?",
        "No, the {view} does not contain the {label}.",
    ),
];

pub(super) const STATE_CHANGE: [Form; 3] = [
    (
        "How does the {label} change from the image to the {view}?",
        "The {label} goes from {old} to {new}.",
    ),
    (
        "Is the {label} in the same state in the {view} as in the image?",
        "No, the {label} is {old} in the image but {new} in the {view}.",
    ),
    (
        "What state change does the {label} undergo in the {view}?",
        "It changes from {old} to {new}.",
    ),
];

pub(super) const MOTION: [Form; 3] = [
    (
        "What is the {label} doing in the {view} compared to the image?",
        "In the {view}, the {label} is {predicate} the {object}.",
    ),
    (
        "How does the {label} in the image act in the {view}?",
        "The {label} ends up {predicate} the {object}.",
    ),
    (
        "Does the {label} do something different in the {view}?",
        "Yes, the {label} is now {predicate} the {object}.",
    ),
];

pub(super) const PERSISTENCE: [Form; 3] = [
    ("Is the relation between the {subject} and the {object} the same in the {view} as in the image?", "Yes, the {subject} is {predicate} the {object} in both."),
    ("Does the {subject} keep {predicate} the {object} in the {view}?", "Yes, the {subject} is still {predicate} the {object}."),
    ("Is the {subject} still {predicate} the {object} in the {view}?", "Yes, both views show the {subject} {predicate} the {object}."),
];

pub(super) const VANISHED: [Form; 3] = [
    ("Is the relation between the {subject} and the {object} the same in the {view} as in the image?", "No, the {subject} is no longer {predicate} the {object} in the {view}."),
    ("Does the {subject} keep {predicate} the {object} in the {view}?", "No, only the image shows the {subject} {predicate} the {object}."),
    ("Is the {subject} still {predicate} the {object} in the {view}?", "No, the {view} does not show the {subject} {predicate} the {object}."),
];

pub(super) const EVOLUTION: [Form; 3] = [
    (
        "How does the relation between the {subject} and the {object} change in the {view}?",
        "It changes from {old} to {new}.",
    ),
    (
        "Is the {subject} still {old} the {object} in the {view}?",
        "No, the {subject} switches from {old} to {new} the {object}.",
    ),
    (
        "What happens to the {subject} {old} the {object} in the {view}?",
        "The relation evolves from {old} to {new}.",
    ),
];

pub(super) const EMERGENCE: [Form; 3] = [
    (
        "Does any new relation appear in the {view} that is not present in the image?",
        "Yes, the {subject} is {predicate} the {object} only in the {view}.",
    ),
    (
        "Which relation involving the {subject} emerges in the {view}?",
        "The {subject} starts {predicate} the {object}.",
    ),
    (
        "Is the {subject} {predicate} the {object} in the image?",
        "No, the {subject} is {predicate} the {object} only in the {view}.",
    ),
];

/// Words that filled placeholders may contribute besides graph content.
pub(super) const FILLER_WORDS: [&str; 8] = [
    "a", "an", "and", "around", "frame", "unmarked", "3d", "scene",
];

pub(super) const ALL_FORMS: [&[Form]; 9] = [
    &NEW_OBJECT,
    &APPEARANCE,
    &DISAPPEARANCE,
    &STATE_CHANGE,
    &MOTION,
    &PERSISTENCE,
    &VANISHED,
    &EVOLUTION,
    &EMERGENCE,
];

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Seeded, order-independent choice among `n` forms for one diff item.
fn choose(seed: u64, category: Category, key: &str, n: usize) -> usize {
    (fnv1a(format!("{seed}/{category:?}/{key}").as_bytes()) % n as u64) as usize
}

fn article(label: &str) -> String {
    let vowel = label
        .chars()
        .next()
        .is_some_and(|c| "aeiouAEIOU".contains(c));
    format!("{} {label}", if vowel { "an" } else { "a" })
}

fn join_and(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn attrs(list: &[String]) -> String {
    if list.is_empty() {
        "unmarked".into()
    } else {
        let mut sorted = list.to_vec();
        sorted.sort();
        join_and(&sorted)
    }
}

struct Ctx<'a> {
    pair: &'a PairedSceneGraph,
    view: &'static str,
    seed: u64,
}

impl Ctx<'_> {
    fn emit(
        &self,
        category: Category,
        forms: &[Form],
        key: &str,
        vars: &[(&str, &str)],
        provenance: Vec<ObjectRef>,
    ) -> QAPair {
        let (q, a) = forms[choose(self.seed, category, key, forms.len())];
        let mut all = vars.to_vec();
        all.push(("view", self.view));
        QAPair {
            question: render(q, &all),
            answer: render(a, &all),
            level: category.level(),
            category,
            provenance,
        }
    }

    fn image_label(&self, id: u32) -> &str {
        self.pair.image_sg.label(id).expect("validated id")
    }

    fn other_label(&self, id: u32) -> &str {
        self.pair.other_sg.label(id).expect("validated id")
    }

    fn back_link(&self, other_id: u32) -> Option<u32> {
        self.pair
            .links
            .iter()
            .find(|(_, o)| **o == other_id)
            .map(|(i, _)| *i)
    }

    /// Earliest frame at which a relation touching `other_id` is visible.
    fn first_frame(&self, other_id: u32) -> Option<u32> {
        self.pair
            .other_sg
            .relations
            .iter()
            .filter(|r| r.subject_id == other_id || r.object_id == other_id)
            .filter_map(|r| r.frames.map(|f| f[0]))
            .min()
    }

    fn provenance_other(&self, other_id: u32) -> Vec<ObjectRef> {
        let mut p: Vec<ObjectRef> = self
            .back_link(other_id)
            .map(ObjectRef::image)
            .into_iter()
            .collect();
        p.push(ObjectRef::other(other_id));
        p
    }
}

fn ctx(pair: &PairedSceneGraph, seed: u64) -> Ctx<'_> {
    Ctx {
        pair,
        view: pair.other_view().phrase(),
        seed,
    }
}

fn object_qa(c: &Ctx<'_>, d: &SceneDiff) -> Vec<QAPair> {
    let mut out = Vec::new();
    if !d.unmatched_other_objects.is_empty() {
        let names: Vec<String> = d
            .unmatched_other_objects
            .iter()
            .map(|&id| article(c.other_label(id)))
            .collect();
        let key: Vec<String> = d
            .unmatched_other_objects
            .iter()
            .map(u32::to_string)
            .collect();
        out.push(
            c.emit(
                Category::NewObject,
                &NEW_OBJECT,
                &key.join(","),
                &[("objects", &join_and(&names))],
                d.unmatched_other_objects
                    .iter()
                    .map(|&id| ObjectRef::other(id))
                    .collect(),
            ),
        );
    }
    for &id in &d.unmatched_other_objects {
        let span = match (c.pair.other_view(), c.first_frame(id)) {
            (ViewTag::Video, Some(f)) => format!(" around frame {f}"),
            _ => String::new(),
        };
        out.push(c.emit(
            Category::Appearance,
            &APPEARANCE,
            &id.to_string(),
            &[("label", c.other_label(id)), ("span", &span)],
            vec![ObjectRef::other(id)],
        ));
    }
    for &id in &d.unmatched_image_objects {
        out.push(c.emit(
            Category::Disappearance,
            &DISAPPEARANCE,
            &id.to_string(),
            &[("label", c.image_label(id))],
            vec![ObjectRef::image(id)],
        ));
    }
    for &id in &d.changed_attributes {
        let other_id = c.pair.links[&id];
        let img = c.pair.image_sg.object(id).expect("validated id");
        let oth = c.pair.other_sg.object(other_id).expect("validated id");
        out.push(c.emit(
            Category::StateChange,
            &STATE_CHANGE,
            &id.to_string(),
            &[
                ("label", &img.label),
                ("old", &attrs(&img.attributes)),
                ("new", &attrs(&oth.attributes)),
            ],
            vec![ObjectRef::image(id), ObjectRef::other(other_id)],
        ));
    }
    let moved = d
        .changed_relations
        .iter()
        .map(|r| (r.subject_id, r.other_predicate.as_str(), r.object_id))
        .chain(d.new_relations.iter().map(|(s, p, o)| (*s, p.as_str(), *o)));
    for (s, p, o) in moved {
        let Some(img_s) = c.back_link(s) else {
            continue;
        };
        let prov = vec![
            ObjectRef::image(img_s),
            ObjectRef::other(s),
            ObjectRef::other(o),
        ];
        out.push(c.emit(
            Category::Motion,
            &MOTION,
            &format!("{s}/{p}/{o}"),
            &[
                ("label", c.image_label(img_s)),
                ("predicate", p),
                ("object", c.other_label(o)),
            ],
            prov,
        ));
    }
    out
}

fn relation_qa(c: &Ctx<'_>, d: &SceneDiff) -> Vec<QAPair> {
    let mut out = Vec::new();
    for (s, p, o) in &d.persistent_relations {
        let mut prov = c.provenance_other(*s);
        prov.extend(c.provenance_other(*o));
        out.push(c.emit(
            Category::Persistence,
            &PERSISTENCE,
            &format!("{s}/{p}/{o}"),
            &[
                ("subject", c.other_label(*s)),
                ("predicate", p),
                ("object", c.other_label(*o)),
            ],
            prov,
        ));
    }
    for v in &d.vanished_relations {
        out.push(c.emit(
            Category::Persistence,
            &VANISHED,
            &format!("vanished/{}/{}/{}", v.subject_id, v.predicate, v.object_id),
            &[
                ("subject", c.image_label(v.subject_id)),
                ("predicate", &v.predicate),
                ("object", c.image_label(v.object_id)),
            ],
            vec![
                ObjectRef::image(v.subject_id),
                ObjectRef::image(v.object_id),
            ],
        ));
    }
    for r in &d.changed_relations {
        let mut prov = c.provenance_other(r.subject_id);
        prov.extend(c.provenance_other(r.object_id));
        out.push(c.emit(
            Category::Evolution,
            &EVOLUTION,
            &format!(
                "{}/{}/{}/{}",
                r.subject_id, r.image_predicate, r.other_predicate, r.object_id
            ),
            &[
                ("subject", c.other_label(r.subject_id)),
                ("object", c.other_label(r.object_id)),
                ("old", &r.image_predicate),
                ("new", &r.other_predicate),
            ],
            prov,
        ));
    }
    for (s, p, o) in &d.new_relations {
        let mut prov = c.provenance_other(*s);
        prov.extend(c.provenance_other(*o));
        out.push(c.emit(
            Category::Emergence,
            &EMERGENCE,
            &format!("{s}/{p}/{o}"),
            &[
                ("subject", c.other_label(*s)),
                ("predicate", p),
                ("object", c.other_label(*o)),
            ],
            prov,
        ));
    }
    out
}

/// Object-level QAs: new objects, appearance, disappearance, state change
/// and motion.
pub fn gen_object_qa(pair: &PairedSceneGraph, seed: u64) -> Result<Vec<QAPair>> {
    let d = diff_graphs(pair)?;
    Ok(object_qa(&ctx(pair, seed), &d))
}

/// Relation-level QAs: persistence (including relations that vanish),
/// evolution and emergence.
pub fn gen_relation_qa(pair: &PairedSceneGraph, seed: u64) -> Result<Vec<QAPair>> {
    let d = diff_graphs(pair)?;
    Ok(relation_qa(&ctx(pair, seed), &d))
}

/// Object QAs followed by relation QAs.
pub fn generate_pair(pair: &PairedSceneGraph, seed: u64) -> Result<Vec<QAPair>> {
    let d = diff_graphs(pair)?;
    let c = ctx(pair, seed);
    let mut out = object_qa(&c, &d);
    out.extend(relation_qa(&c, &d));
    Ok(out)
}

/// Alternates object and relation QAs and keeps at most `cap`, so a cap
/// never starves either level.
pub fn interleave_capped(object: Vec<QAPair>, relation: Vec<QAPair>, cap: usize) -> Vec<QAPair> {
    let mut out = Vec::with_capacity(cap.min(object.len() + relation.len()));
    let mut a = object.into_iter();
    let mut b = relation.into_iter();
    while out.len() < cap {
        match (a.next(), b.next()) {
            (None, None) => break,
            (x, y) => {
                out.extend(x);
                if out.len() < cap {
                    out.extend(y);
                }
            }
        }
    }
    out
}
