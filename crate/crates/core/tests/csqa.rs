use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use synmoe_core::csqa::{
    diff_graphs, emit_jsonl, gen_object_qa, gen_relation_qa, generate_pair, identity_pair,
    read_jsonl, synthetic_pair, template_vocabulary, validate_qa, Level, ObjectRef,
    PairedSceneGraph, QAPair, Side, Verdict,
};
use synmoe_core::rng::stream;
use synmoe_core::Error;

type T = (u32, String, u32);

/// Set-algebra diff over translated triples, computed from definitions.
struct OracleDiff {
    unmatched_image: BTreeSet<u32>,
    unmatched_other: BTreeSet<u32>,
    persistent: BTreeSet<T>,
    changed: BTreeSet<(u32, u32, String, String)>,
    new: BTreeSet<T>,
    vanished: BTreeSet<T>,
}

fn oracle(p: &PairedSceneGraph) -> OracleDiff {
    let image_ids: BTreeSet<u32> = p.image_sg.objects.iter().map(|o| o.id).collect();
    let other_ids: BTreeSet<u32> = p.other_sg.objects.iter().map(|o| o.id).collect();
    let linked_other: BTreeSet<u32> = p.links.values().copied().collect();
    let image_triples: BTreeSet<T> = p
        .image_sg
        .relations
        .iter()
        .map(|r| (r.subject_id, r.predicate.clone(), r.object_id))
        .collect();
    let translated: BTreeSet<T> = image_triples
        .iter()
        .filter_map(|(s, pr, o)| Some((*p.links.get(s)?, pr.clone(), *p.links.get(o)?)))
        .collect();
    let other: BTreeSet<T> = p
        .other_sg
        .relations
        .iter()
        .map(|r| (r.subject_id, r.predicate.clone(), r.object_id))
        .collect();
    let preds = |set: &BTreeSet<T>, s: u32, o: u32| -> BTreeSet<String> {
        set.iter()
            .filter(|t| t.0 == s && t.2 == o)
            .map(|t| t.1.clone())
            .collect()
    };
    let mut changed = BTreeSet::new();
    let mut changed_keys = BTreeSet::new();
    let keys: BTreeSet<(u32, u32)> = translated.iter().map(|t| (t.0, t.2)).collect();
    for (s, o) in keys {
        let a = preds(&translated, s, o);
        let b = preds(&other, s, o);
        let only_a: Vec<_> = a.difference(&b).collect();
        let only_b: Vec<_> = b.difference(&a).collect();
        if !only_a.is_empty() && !only_b.is_empty() {
            changed_keys.insert((s, o));
            for x in &only_a {
                for y in &only_b {
                    changed.insert((s, o, (*x).clone(), (*y).clone()));
                }
            }
        }
    }
    let back: BTreeMap<u32, u32> = p.links.iter().map(|(a, b)| (*b, *a)).collect();
    let mut vanished: BTreeSet<T> = image_triples
        .iter()
        .filter(|(s, _, o)| !p.links.contains_key(s) || !p.links.contains_key(o))
        .cloned()
        .collect();
    for t in translated.difference(&other) {
        if !changed_keys.contains(&(t.0, t.2)) {
            vanished.insert((back[&t.0], t.1.clone(), back[&t.2]));
        }
    }
    OracleDiff {
        unmatched_image: image_ids
            .iter()
            .filter(|i| !p.links.contains_key(i))
            .copied()
            .collect(),
        unmatched_other: other_ids.difference(&linked_other).copied().collect(),
        persistent: translated.intersection(&other).cloned().collect(),
        changed,
        new: other
            .difference(&translated)
            .filter(|t| !changed_keys.contains(&(t.0, t.2)))
            .cloned()
            .collect(),
        vanished,
    }
}

#[test]
fn diff_matches_set_algebra_oracle() {
    let mut nontrivial = 0;
    for seed in 0..200 {
        let p = synthetic_pair(seed, 10);
        let d = diff_graphs(&p).unwrap();
        let o = oracle(&p);
        assert_eq!(
            d.unmatched_image_objects
                .iter()
                .copied()
                .collect::<BTreeSet<_>>(),
            o.unmatched_image,
            "seed {seed}"
        );
        assert_eq!(
            d.unmatched_other_objects
                .iter()
                .copied()
                .collect::<BTreeSet<_>>(),
            o.unmatched_other
        );
        assert_eq!(d.persistent_relations, o.persistent, "seed {seed}");
        assert_eq!(d.new_relations, o.new, "seed {seed}");
        let changed: BTreeSet<_> = d
            .changed_relations
            .iter()
            .map(|c| {
                (
                    c.subject_id,
                    c.object_id,
                    c.image_predicate.clone(),
                    c.other_predicate.clone(),
                )
            })
            .collect();
        assert_eq!(changed, o.changed, "seed {seed}");
        let vanished: BTreeSet<T> = d
            .vanished_relations
            .iter()
            .map(|v| (v.subject_id, v.predicate.clone(), v.object_id))
            .collect();
        assert_eq!(vanished, o.vanished, "seed {seed}");
        if !o.changed.is_empty() && !o.persistent.is_empty() {
            nontrivial += 1;
        }
    }
    assert!(
        nontrivial > 10,
        "generator rarely produces changes: {nontrivial}"
    );
}

#[test]
fn identity_pairs_yield_no_change_categories() {
    for seed in 0..200 {
        let p = synthetic_pair(seed, 10);
        for sg in [&p.image_sg, &p.other_sg] {
            let id = identity_pair(sg, p.pair_kind);
            let qa = generate_pair(&id, seed).unwrap();
            assert!(qa.iter().all(|q| !q.category.is_change()), "seed {seed}");
            let rel: BTreeSet<_> = sg
                .relations
                .iter()
                .map(|r| (r.subject_id, r.predicate.clone(), r.object_id))
                .collect();
            assert_eq!(qa.len(), rel.len());
        }
    }
}

#[test]
fn generated_qas_are_grounded_and_cover_the_diff() {
    for seed in 0..200 {
        let p = synthetic_pair(seed, 10);
        let d = diff_graphs(&p).unwrap();
        let obj = gen_object_qa(&p, seed).unwrap();
        let rel = gen_relation_qa(&p, seed).unwrap();
        assert!(obj.iter().all(|q| q.level == Level::Object));
        assert!(rel.iter().all(|q| q.level == Level::Relation));
        assert!(
            obj.len()
                >= d.unmatched_image_objects
                    .len()
                    .max(d.unmatched_other_objects.len())
        );
        let changed_keys: BTreeSet<(u32, u32)> = d
            .changed_relations
            .iter()
            .map(|c| (c.subject_id, c.object_id))
            .collect();
        assert!(rel.len() >= changed_keys.len() + d.new_relations.len());
        for qa in obj.iter().chain(&rel) {
            assert_eq!(validate_qa(&p, qa), Verdict::Accept, "seed {seed}: {qa:?}");
        }
        assert_eq!(gen_object_qa(&p, seed).unwrap(), obj);
    }
}

/// Groundedness recomputed from the raw graphs.
fn grounded(p: &PairedSceneGraph, qa: &QAPair, templates: &BTreeSet<String>) -> bool {
    let mut vocab = BTreeSet::new();
    let mut add = |s: &str| {
        for w in s
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            vocab.insert(w.to_lowercase());
        }
    };
    for sg in [&p.image_sg, &p.other_sg] {
        for o in &sg.objects {
            add(&o.label);
            o.attributes.iter().for_each(|a| add(a));
        }
        for r in &sg.relations {
            add(&r.predicate);
            if let Some([a, b]) = r.frames {
                add(&format!("{a} {b}"));
            }
        }
    }
    let words_ok = qa
        .answer
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .all(|w| {
            let w = w.to_lowercase();
            templates.contains(&w) || vocab.contains(&w)
        });
    let prov_ok = qa.provenance.iter().all(|r| {
        let sg = match r.side {
            Side::Image => &p.image_sg,
            Side::Other => &p.other_sg,
        };
        sg.objects.iter().any(|o| o.id == r.id)
    });
    words_ok && prov_ok
}

#[test]
fn validator_agrees_with_recomputed_groundedness_under_fuzz() {
    let templates = template_vocabulary();
    let pool = [
        "unicorn",
        "ball",
        "baby",
        "dragon",
        "sofa",
        "teapot",
        "red",
        "violet",
        "holding",
        "juggling",
        "toy",
        "spaceship",
    ];
    let mut rng = stream(99, "fuzz");
    let mut mutated = 0;
    let mut rejected = 0;
    let mut oracle_rejected = 0;
    let mut seed = 0u64;
    while mutated < 1000 {
        let p = synthetic_pair(seed, 8);
        let qas = generate_pair(&p, seed).unwrap();
        seed += 1;
        for qa in qas {
            if mutated == 1000 {
                break;
            }
            let mut m = qa.clone();
            if rng.random_bool(0.8) {
                let mut words: Vec<String> = m.answer.split(' ').map(String::from).collect();
                let i = rng.random_range(0..words.len());
                words[i] = pool.choose(&mut rng).unwrap().to_string();
                m.answer = words.join(" ");
            } else {
                let side = if rng.random_bool(0.5) {
                    Side::Image
                } else {
                    Side::Other
                };
                m.provenance.push(ObjectRef {
                    side,
                    id: rng.random_range(0..120),
                });
            }
            let accepted = validate_qa(&p, &m).is_accept();
            let expect = grounded(&p, &m, &templates);
            assert_eq!(accepted, expect, "{m:?}");
            rejected += usize::from(!accepted);
            oracle_rejected += usize::from(!expect);
            mutated += 1;
        }
    }
    assert_eq!(rejected, oracle_rejected);
    assert!(rejected > 100 && rejected < 1000, "rejected {rejected}");
}

#[test]
fn jsonl_round_trips_one_hundred_pairs() {
    let mut all = Vec::new();
    let mut seed = 0;
    while all.len() < 100 {
        all.extend(generate_pair(&synthetic_pair(seed, 10), seed).unwrap());
        seed += 1;
    }
    all.truncate(100);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qa.jsonl");
    assert_eq!(emit_jsonl(&all, &path).unwrap(), 100);
    assert_eq!(read_jsonl(&path).unwrap(), all);
    let text = std::fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let keys: Vec<String> =
            serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(line)
                .unwrap()
                .keys()
                .cloned()
                .collect();
        assert_eq!(
            keys,
            ["question", "answer", "level", "category", "provenance"]
        );
    }
    let empty = dir.path().join("empty.jsonl");
    assert_eq!(emit_jsonl(&[], &empty).unwrap(), 0);
    assert_eq!(std::fs::read_to_string(&empty).unwrap(), "");
}

#[test]
fn thousand_qas_generate_quickly() {
    let start = Instant::now();
    let mut n = 0;
    let mut seed = 0;
    while n < 1000 {
        n += generate_pair(&synthetic_pair(seed, 10), seed)
            .unwrap()
            .len();
        seed += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "{secs:.2}s for {n} QAs");
}

#[test]
fn malformed_json_reports_location() {
    let err = PairedSceneGraph::from_json("{\n  \"image_sg\": [1,\n").unwrap_err();
    match err {
        Error::Parse(m) => assert!(m.contains("line") && m.contains("column"), "{m}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}
