//! Per-frame conjunction of verified triples.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::refine::VerifiedPair;
use crate::model::{EntityId, FrameId, FrameSpec, SegmentId, TripleRef};

/// Entity bindings under which every triple of one query frame holds in one
/// physical frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBinding {
    pub vid: SegmentId,
    pub fid: FrameId,
    pub entity_bindings: BTreeMap<String, EntityId>,
    pub min_confidence: f64,
    /// Confidence per triple of the frame spec, in spec order.
    pub confidences: Vec<f64>,
}

/// Binds `key` to `eid`, or checks an existing binding. Returns whether the
/// key was newly bound.
fn bind(bindings: &mut BTreeMap<String, EntityId>, key: &str, eid: EntityId) -> Option<bool> {
    match bindings.get(key) {
        Some(e) if *e == eid => Some(false),
        Some(_) => None,
        None => {
            bindings.insert(key.to_owned(), eid);
            Some(true)
        }
    }
}

fn extend(
    triples: &[TripleRef],
    groups: &[&Vec<&VerifiedPair>],
    depth: usize,
    bindings: &mut BTreeMap<String, EntityId>,
    confidences: &mut Vec<f64>,
    out: &mut Vec<(BTreeMap<String, EntityId>, Vec<f64>)>,
) {
    if depth == triples.len() {
        out.push((bindings.clone(), confidences.clone()));
        return;
    }
    let t = &triples[depth];
    for p in groups[depth] {
        let Some(new_s) = bind(bindings, &t.subject, p.pair.sid) else { continue };
        if let Some(new_o) = bind(bindings, &t.object, p.pair.oid) {
            confidences.push(p.confidence);
            extend(triples, groups, depth + 1, bindings, confidences, out);
            confidences.pop();
            if new_o {
                bindings.remove(&t.object);
            }
        }
        if new_s {
            bindings.remove(&t.subject);
        }
    }
}

/// Natural join on `(vid, fid)` across the frame's triples, keeping only
/// combinations that bind each entity key to a single eid. Output is sorted
/// by `(vid, fid, bindings)`.
///
/// Panics if `verified` lacks an entry for a triple of `fs`.
pub fn conjoin_frame(fs: &FrameSpec, verified: &HashMap<TripleRef, Vec<VerifiedPair>>) -> Vec<FrameBinding> {
    let mut grouped: Vec<BTreeMap<(&str, FrameId), Vec<&VerifiedPair>>> = Vec::with_capacity(fs.triples.len());
    for t in &fs.triples {
        let pairs = verified.get(t).unwrap_or_else(|| panic!("no verified pairs for triple {t}"));
        let mut by_frame: BTreeMap<(&str, FrameId), Vec<&VerifiedPair>> = BTreeMap::new();
        for p in pairs {
            by_frame.entry((p.pair.vid.as_str(), p.pair.fid)).or_default().push(p);
        }
        grouped.push(by_frame);
    }
    let Some((first, rest)) = grouped.split_first() else { return Vec::new() };

    let mut out = Vec::new();
    for (key, pairs) in first {
        let mut groups = vec![pairs];
        for g in rest {
            match g.get(key) {
                Some(ps) => groups.push(ps),
                None => break,
            }
        }
        if groups.len() != grouped.len() {
            continue;
        }
        let mut found = Vec::new();
        extend(&fs.triples, &groups, 0, &mut BTreeMap::new(), &mut Vec::new(), &mut found);
        found.sort_by(|a, b| a.0.cmp(&b.0));
        found.dedup_by(|a, b| a.0 == b.0);
        for (entity_bindings, confidences) in found {
            out.push(FrameBinding {
                vid: key.0.to_owned(),
                fid: key.1,
                min_confidence: confidences.iter().copied().fold(1.0, f64::min),
                entity_bindings,
                confidences,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{CandidatePair, EntityMatch};
    use proptest::prelude::*;

    fn vp(vid: &str, fid: FrameId, sid: EntityId, oid: EntityId, confidence: f64) -> VerifiedPair {
        let m = |eid| EntityMatch { vid: vid.into(), eid, text_score: 1.0, image_score: 0.0, combined_score: 1.0 };
        VerifiedPair {
            pair: CandidatePair { vid: vid.into(), fid, sid, oid, rl: "r".into(), subject_match: m(sid), object_match: m(oid) },
            confidence,
        }
    }

    #[test]
    fn single_triple_is_identity() {
        let t = TripleRef::new("e1", "r1", "e2");
        let fs = FrameSpec { index: 0, triples: vec![t.clone()] };
        let pairs = vec![vp("a", 1, 1, 2, 0.9), vp("a", 1, 3, 2, 1.0), vp("b", 4, 1, 2, 0.7)];
        let out = conjoin_frame(&fs, &HashMap::from([(t, pairs.clone())]));
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].min_confidence, 0.9);
        assert_eq!(out[2].vid, "b");
    }

    #[test]
    fn shared_object_must_agree() {
        let near = TripleRef::new("e1", "r1", "e2");
        let left = TripleRef::new("e3", "r2", "e2");
        let fs = FrameSpec { index: 0, triples: vec![near.clone(), left.clone()] };
        let verified = HashMap::from([
            (near, vec![vp("a", 1, 1, 2, 1.0), vp("a", 2, 1, 2, 1.0)]),
            (left, vec![vp("a", 1, 3, 2, 0.6), vp("a", 2, 3, 9, 1.0)]),
        ]);
        let out = conjoin_frame(&fs, &verified);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].fid, 1);
        assert_eq!(out[0].entity_bindings, BTreeMap::from([("e1".into(), 1), ("e2".into(), 2), ("e3".into(), 3)]));
        assert_eq!(out[0].confidences, vec![1.0, 0.6]);
    }

    /// Every combination of one pair per triple, filtered by consistency.
    fn brute(fs: &FrameSpec, verified: &HashMap<TripleRef, Vec<VerifiedPair>>) -> Vec<(String, FrameId, BTreeMap<String, EntityId>, Vec<f64>)> {
        let lists: Vec<&Vec<VerifiedPair>> = fs.triples.iter().map(|t| &verified[t]).collect();
        let mut out = Vec::new();
        let total: usize = lists.iter().map(|l| l.len()).product();
        for mut code in 0..total {
            let mut combo = Vec::new();
            for l in &lists {
                combo.push(&l[code % l.len()]);
                code /= l.len();
            }
            let (vid, fid) = (&combo[0].pair.vid, combo[0].pair.fid);
            if combo.iter().any(|p| &p.pair.vid != vid || p.pair.fid != fid) {
                continue;
            }
            let mut b: BTreeMap<String, EntityId> = BTreeMap::new();
            let mut ok = true;
            for (t, p) in fs.triples.iter().zip(&combo) {
                for (k, e) in [(&t.subject, p.pair.sid), (&t.object, p.pair.oid)] {
                    if *b.entry(k.clone()).or_insert(e) != e {
                        ok = false;
                    }
                }
            }
            if ok {
                out.push((vid.clone(), fid, b, combo.iter().map(|p| p.confidence).collect()));
            }
        }
        out.sort_by(|a, b| (&a.0, a.1, &a.2).cmp(&(&b.0, b.1, &b.2)));
        out.dedup_by(|a, b| (&a.0, a.1, &a.2) == (&b.0, b.1, &b.2));
        out
    }

    proptest! {
        #[test]
        fn equals_exhaustive_binding_enumeration(
            shape in prop::collection::vec((0usize..3, 0usize..3), 1..4),
            raw in prop::collection::vec(prop::collection::vec((0u32..2, 0u32..3, 0u32..3, 0u32..3), 0..8), 3),
        ) {
            let keys = ["e1", "e2", "e3"];
            let triples: Vec<TripleRef> = shape
                .iter()
                .map(|(s, o)| TripleRef::new(keys[*s], "r", keys[(*s + 1 + *o % 2) % 3]))
                .collect();
            let mut verified = HashMap::new();
            for (i, t) in triples.iter().enumerate() {
                let mut pairs: Vec<VerifiedPair> = raw[i % 3]
                    .iter()
                    .filter(|(_, _, s, o)| s != o)
                    .map(|(v, f, s, o)| vp(["a", "b"][*v as usize], *f, *s, *o, 0.5 + f64::from(*s) / 10.0))
                    .collect();
                pairs.sort_by(|a, b| (&a.pair.vid, a.pair.fid, a.pair.sid, a.pair.oid).cmp(&(&b.pair.vid, b.pair.fid, b.pair.sid, b.pair.oid)));
                pairs.dedup_by(|a, b| (&a.pair.vid, a.pair.fid, a.pair.sid, a.pair.oid) == (&b.pair.vid, b.pair.fid, b.pair.sid, b.pair.oid));
                verified.entry(t.clone()).or_insert(pairs);
            }
            let fs = FrameSpec { index: 0, triples };
            let got: Vec<_> = conjoin_frame(&fs, &verified)
                .into_iter()
                .map(|b| (b.vid, b.fid, b.entity_bindings, b.confidences))
                .collect();
            prop_assert_eq!(got, brute(&fs, &verified));
        }
    }
}
