//! Grounding check for generated or hand-written QAs.

use std::collections::BTreeSet;
use std::fmt;

use super::generate::{ALL_FORMS, FILLER_WORDS};
use super::graph::{words, PairedSceneGraph, Side};
use super::QAPair;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RejectReason {
    /// an answer word is neither template text nor graph content
    UngroundedLabel(String),
    /// a provenance id does not exist on its side
    UnknownProvenance(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::UngroundedLabel(w) => write!(f, "ungrounded label {w:?}"),
            RejectReason::UnknownProvenance(r) => write!(f, "unknown provenance {r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Every word the template bank itself can contribute.
pub fn template_vocabulary() -> BTreeSet<String> {
    let mut v: BTreeSet<String> = FILLER_WORDS.iter().map(|s| s.to_string()).collect();
    v.extend(["image", "video"].map(String::from));
    for forms in ALL_FORMS {
        for (q, a) in forms {
            for t in [q, a] {
                let mut text = t.to_string();
                while let Some(start) = text.find('{') {
                    let end = text[start..]
                        .find('}')
                        .map_or(text.len(), |e| start + e + 1);
                    text.replace_range(start..end, " ");
                }
                v.extend(words(&text));
            }
        }
    }
    v
}

/// Accepts `qa` iff every answer word is template text or occurs in one of
/// the pair's graphs, and every provenance id exists.
pub fn validate_qa(pair: &PairedSceneGraph, qa: &QAPair) -> Verdict {
    validate_with(&template_vocabulary(), pair, qa)
}

pub(crate) fn validate_with(
    templates: &BTreeSet<String>,
    pair: &PairedSceneGraph,
    qa: &QAPair,
) -> Verdict {
    let graph = pair.vocabulary();
    for w in words(&qa.answer) {
        if !templates.contains(&w) && !graph.contains(&w) {
            return Verdict::Reject(RejectReason::UngroundedLabel(w));
        }
    }
    for r in &qa.provenance {
        let sg = match r.side {
            Side::Image => &pair.image_sg,
            Side::Other => &pair.other_sg,
        };
        if sg.object(r.id).is_none() {
            return Verdict::Reject(RejectReason::UnknownProvenance(r.to_string()));
        }
    }
    Verdict::Accept
}
