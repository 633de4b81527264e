//! Brute-force reference implementations shared by the integration suites.
//! None of these call into the engine or store query paths.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use scenequery_core::backends::{Embedder, GroundTruth};
use scenequery_core::model::{EntityId, FrameId, HyperParams, QuerySpec, RelationshipRow, TripleRef};
use scenequery_core::store::{EntityMatch, RelationshipStore};
use scenequery_core::synth::Corpus;
use scenequery_core::Dataset;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

pub fn cos(a: &[f32], b: &[f32]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub vid: String,
    pub frames: Vec<FrameId>,
    pub bindings: BTreeMap<String, EntityId>,
    pub score: f64,
}

impl OracleResult {
    pub fn key(&self) -> (String, Vec<FrameId>, BTreeMap<String, EntityId>) {
        (self.vid.clone(), self.frames.clone(), self.bindings.clone())
    }
}

/// Candidate scores per query key by scanning every stored entity.
pub fn oracle_candidates(
    dataset: &Dataset,
    q: &QuerySpec,
    embedder: &dyn Embedder,
    params: &HyperParams,
) -> BTreeMap<String, HashMap<(String, EntityId), f64>> {
    let relax = 1.0 - params.temperature;
    let mut out = BTreeMap::new();
    for e in &q.entities {
        let v = embedder.embed_text(&e.text).unwrap();
        let mut hits = HashMap::new();
        for rec in dataset.entities().iter() {
            let t = cos(&v, &rec.ete);
            let i = cos(&v, &rec.eie);
            if t >= params.text_threshold * relax || i >= params.image_threshold * relax {
                hits.insert((rec.vid.clone(), rec.eid), t.max(i));
            }
        }
        out.insert(e.key.clone(), hits);
    }
    out
}

/// Precomputed lookups over a corpus: rows keyed by `(fid, sid, oid)` and
/// entities present per frame, straight from the scene-graph documents.
pub struct OracleIndex<'a> {
    pub corpus: &'a Corpus,
    truth: GroundTruth,
    rows: Vec<HashMap<(FrameId, EntityId, EntityId), Vec<String>>>,
    present: Vec<BTreeMap<FrameId, Vec<EntityId>>>,
}

impl<'a> OracleIndex<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        let mut rows = Vec::new();
        let mut present = Vec::new();
        for doc in &corpus.docs {
            let mut r: HashMap<(FrameId, EntityId, EntityId), Vec<String>> = HashMap::new();
            for t in &doc.triples {
                r.entry((t.fid, t.sid, t.oid)).or_default().push(t.rl.clone());
            }
            rows.push(r);
            let mut p: BTreeMap<FrameId, Vec<EntityId>> = doc.segment.frame_ids.iter().map(|f| (*f, Vec::new())).collect();
            for d in &doc.detections {
                for f in &d.frame_ids {
                    p.get_mut(f).unwrap().push(d.eid);
                }
            }
            present.push(p);
        }
        Self { corpus, truth: corpus.ground_truth().unwrap(), rows, present }
    }
}

/// Full scan of every segment and frame, every binding of the query's
/// entity keys to entities present in the frame, the sidecar as verifier,
/// and a Cartesian product over query frames filtered by the constraints.
pub fn oracle(index: &OracleIndex, dataset: &Dataset, embedder: &dyn Embedder, q: &QuerySpec, params: &HyperParams) -> Vec<OracleResult> {
    let cands = oracle_candidates(dataset, q, embedder, params);
    let relax = 1.0 - params.temperature;
    let mut label_memo: HashMap<(String, String), bool> = HashMap::new();
    let mut label_ok = |rel_key: &str, rl: &str| match params.rel_label_threshold {
        None => true,
        Some(t) => *label_memo.entry((rel_key.to_owned(), rl.to_owned())).or_insert_with(|| {
            let a = embedder.embed_text(q.relation_text(rel_key).unwrap()).unwrap();
            let b = embedder.embed_text(rl).unwrap();
            cos(&a, &b) >= t * relax
        }),
    };

    let mut results = Vec::new();
    for (d, doc) in index.corpus.docs.iter().enumerate() {
        let vid = doc.segment.vid.as_str();
        let holds_at = |t: &TripleRef, fid: FrameId, s: EntityId, o: EntityId, label_ok: &mut dyn FnMut(&str, &str) -> bool| {
            cands[&t.subject].contains_key(&(vid.to_owned(), s))
                && cands[&t.object].contains_key(&(vid.to_owned(), o))
                && index.rows[d].get(&(fid, s, o)).is_some_and(|rls| rls.iter().any(|rl| label_ok(&t.rel, rl)))
                && index.truth.holds(vid, fid, &q.triple_text(t).unwrap())
        };
        // per query frame: (fid, bindings) that make all its triples hold
        let mut per_frame: Vec<Vec<(FrameId, BTreeMap<String, EntityId>)>> = vec![Vec::new(); q.frames.len()];
        for (&fid, present) in &index.present[d] {
            for (p, fs) in q.frames.iter().enumerate() {
                let mut found = BTreeSet::new();
                enumerate(&fs.triples, 0, present, &mut BTreeMap::new(), &mut |b| {
                    found.insert(b.clone());
                }, &mut |t, s, o| holds_at(t, fid, s, o, &mut label_ok));
                per_frame[p].extend(found.into_iter().map(|b| (fid, b)));
            }
        }
        // Cartesian product
        let total: usize = per_frame.iter().map(Vec::len).product();
        for mut code in 0..total {
            let mut pick = Vec::new();
            for l in &per_frame {
                pick.push(&l[code % l.len()]);
                code /= l.len();
            }
            if pick.windows(2).any(|w| w[0].0 >= w[1].0) {
                continue;
            }
            if !q.temporal.iter().all(|c| c.holds(pick[c.later].0, pick[c.earlier].0)) {
                continue;
            }
            let mut merged: BTreeMap<String, EntityId> = BTreeMap::new();
            if !pick.iter().all(|(_, b)| b.iter().all(|(k, e)| *merged.entry(k.clone()).or_insert(*e) == *e)) {
                continue;
            }
            let sims: Vec<f64> = merged.iter().map(|(k, e)| cands[k][&(vid.to_owned(), *e)].clamp(0.0, 1.0)).collect();
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            // the mock verifier only answers 1.0
            let score = (mean * 1.0).sqrt();
            results.push(OracleResult { vid: vid.to_owned(), frames: pick.iter().map(|p| p.0).collect(), bindings: merged, score });
        }
    }
    results.sort_by_key(|r| r.key());
    results
}

fn enumerate(
    triples: &[TripleRef],
    depth: usize,
    present: &[EntityId],
    binding: &mut BTreeMap<String, EntityId>,
    emit: &mut dyn FnMut(&BTreeMap<String, EntityId>),
    holds: &mut dyn FnMut(&TripleRef, EntityId, EntityId) -> bool,
) {
    if depth == triples.len() {
        emit(binding);
        return;
    }
    let t = &triples[depth];
    for &s in present {
        for &o in present {
            if s == o {
                continue;
            }
            let bs = binding.get(&t.subject).copied();
            let bo = binding.get(&t.object).copied();
            if bs.is_some_and(|b| b != s) || bo.is_some_and(|b| b != o) {
                continue;
            }
            if !holds(t, s, o) {
                continue;
            }
            binding.insert(t.subject.clone(), s);
            binding.insert(t.object.clone(), o);
            enumerate(triples, depth + 1, present, binding, emit, holds);
            if bs.is_none() {
                binding.remove(&t.subject);
            }
            if bo.is_none() {
                binding.remove(&t.object);
            }
        }
    }
}

/// Exhaustive entity-search reference: every record, both modalities,
/// ordered by combined score then `(vid, eid)`.
pub fn scan_entities(
    records: &[(String, EntityId, Vec<f32>, Vec<f32>)],
    query: &[f32],
    params: &HyperParams,
) -> Vec<(String, EntityId, f64)> {
    let relax = 1.0 - params.temperature;
    let mut out: Vec<(String, EntityId, f64)> = records
        .iter()
        .filter_map(|(vid, eid, ete, eie)| {
            let t = cos(query, ete);
            let i = cos(query, eie);
            (t >= params.text_threshold * relax || i >= params.image_threshold * relax).then(|| (vid.clone(), *eid, t.max(i)))
        })
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (&a.0, a.1).cmp(&(&b.0, b.1))));
    out
}

/// Nested-loop join reference over all stored rows.
pub fn nested_loop_join(
    rows: &[RelationshipRow],
    subjects: &[EntityMatch],
    objects: &[EntityMatch],
    label_ok: &dyn Fn(&str) -> bool,
) -> Vec<(String, FrameId, EntityId, EntityId, String)> {
    let mut out = Vec::new();
    for r in rows {
        for s in subjects {
            for o in objects {
                if s.vid == r.vid && o.vid == r.vid && s.eid == r.sid && o.eid == r.oid && label_ok(&r.rl) {
                    out.push((r.vid.clone(), r.fid, r.sid, r.oid, r.rl.clone()));
                }
            }
        }
    }
    out.sort_by(|a, b| (&a.0, a.1, a.2, a.3, &a.4).cmp(&(&b.0, b.1, b.2, b.3, &b.4)));
    out.dedup();
    out
}

/// Full-scan predicate filter reference for candidate retrieval.
pub fn scan_filter(store: &RelationshipStore, matches: &[EntityMatch], subject: bool, object: bool) -> Vec<RelationshipRow> {
    let keys: BTreeSet<(&str, EntityId)> = matches.iter().map(|m| (m.vid.as_str(), m.eid)).collect();
    let mut out: Vec<RelationshipRow> = store
        .iter()
        .filter(|r| {
            (subject && keys.contains(&(r.vid.as_str(), r.sid))) || (object && keys.contains(&(r.vid.as_str(), r.oid)))
        })
        .cloned()
        .collect();
    out.sort();
    out
}

pub fn truth_of(corpus: &Corpus) -> GroundTruth {
    corpus.ground_truth().unwrap()
}
