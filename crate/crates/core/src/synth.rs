//! Synthetic corpora with ground-truth sidecars, for tests, demos and
//! benchmarks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::mock::MockEmbedder;
use crate::backends::{Embedder, GroundTruth, GroundTruthError, SegmentTruth};
use crate::dataset::Dataset;
use crate::ingest::{Detection, ObservedTriple, SceneGraphDocument};
use crate::model::{
    validate_query, EntityDecl, EntityId, FrameId, FrameSpec, Fps, HyperParams, QuerySpec, RelationDecl,
    TemporalConstraint, TemporalOp, TripleRef, VideoSegment,
};

/// Man with a backpack near a bicycle while a man in red moves from its
/// left to its right more than four frames later.
pub const BACKPACK_BICYCLE_QUERY: &str = r#"{
  "entities": [
    {"key": "e1", "text": "man with backpack"},
    {"key": "e2", "text": "bicycle"},
    {"key": "e3", "text": "man in red"}
  ],
  "relationships": [
    {"key": "r1", "text": "is near"},
    {"key": "r2", "text": "leftOf"},
    {"key": "r3", "text": "rightOf"}
  ],
  "frames": [
    {"index": 0, "triples": [["e1", "r1", "e2"], ["e3", "r2", "e2"]]},
    {"index": 1, "triples": [["e1", "r1", "e2"], ["e3", "r3", "e2"]]}
  ],
  "temporal": [
    {"later": 1, "earlier": 0, "op": ">", "bound": 4}
  ]
}
"#;

pub const VOCABULARY: &[&str] = &[
    "man with backpack",
    "bicycle",
    "man in red",
    "woman",
    "dog",
    "red car",
    "blue car",
    "car",
    "tree",
    "bench",
    "traffic light",
    "child",
    "bus",
    "umbrella",
    "suitcase",
];

pub const RELATIONS: &[&str] = &["near", "leftOf", "rightOf", "holding", "behind", "on"];

/// Scene-graph documents plus their ground-truth sidecars.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: Vec<SceneGraphDocument>,
    pub truth: Vec<SegmentTruth>,
}

impl Corpus {
    pub fn ground_truth(&self) -> Result<GroundTruth, GroundTruthError> {
        GroundTruth::from_segments(self.truth.iter().cloned())
    }

    /// Mock embedder reading this corpus's image labels.
    pub fn embedder(&self, seed: u64, dimension: usize) -> MockEmbedder {
        MockEmbedder::new(seed, dimension).with_truth(Arc::new(self.ground_truth().expect("consistent corpus truth")))
    }

    pub fn ingest(&self, embedder: &dyn Embedder) -> Dataset {
        let mut ds = Dataset::new(embedder.dimension());
        ds.ingest_batch(&self.docs, embedder).expect("synthetic corpus ingests");
        ds
    }

    pub fn total_frames(&self) -> usize {
        self.docs.iter().map(|d| d.segment.frame_ids.len()).sum()
    }

    /// What the crop of a detection depicts, falling back to its label.
    pub fn visual_label<'a>(&'a self, doc: usize, eid: EntityId) -> Option<&'a str> {
        let d = self.docs[doc].detections.iter().find(|d| d.eid == eid)?;
        let truth = &self.truth[doc];
        Some(
            d.crops
                .values()
                .next()
                .and_then(|loc| truth.image_labels.get(loc))
                .map_or(d.label.as_str(), String::as_str),
        )
    }
}

struct SegmentBuilder {
    doc: SceneGraphDocument,
    truth: SegmentTruth,
}

impl SegmentBuilder {
    fn new(vid: &str, source: &str, first: FrameId, len: u32, fps: Fps) -> Self {
        Self {
            doc: SceneGraphDocument {
                segment: VideoSegment {
                    vid: vid.into(),
                    source_video: source.into(),
                    fps,
                    frame_ids: (first..first + len).collect(),
                    frame_images: (first..first + len).map(|f| (f, format!("{vid}/frames/{f}.jpg"))).collect(),
                },
                detections: Vec::new(),
                triples: Vec::new(),
            },
            truth: SegmentTruth { vid: vid.into(), ..Default::default() },
        }
    }

    fn base(&self) -> FrameId {
        self.doc.segment.frame_ids[0]
    }

    /// Adds a detection over relative frames `[from, to)`, with a crop at its
    /// first frame depicting `crop_label` when given.
    fn entity(&mut self, eid: EntityId, label: &str, crop_label: Option<&str>, from: u32, to: u32) {
        let base = self.base();
        let frame_ids: Vec<FrameId> = (base + from..base + to).collect();
        let mut crops = BTreeMap::new();
        if let Some(visual) = crop_label {
            let loc = format!("{}/crops/{eid}.jpg", self.doc.segment.vid);
            crops.insert(frame_ids[0], loc.clone());
            self.truth.image_labels.insert(loc, visual.into());
        }
        self.doc.detections.push(Detection { eid, label: label.into(), frame_ids, crops });
    }

    /// Stores `(sid, rl, oid)` over relative frames `[from, to]`; when
    /// `holds` is given the verifier will confirm that text there.
    fn relate(&mut self, from: u32, to: u32, sid: EntityId, rl: &str, oid: EntityId, holds: Option<&str>) {
        let base = self.base();
        for f in base + from..=base + to {
            self.doc.triples.push(ObservedTriple { fid: f, sid, rl: rl.into(), oid });
            if let Some(text) = holds {
                self.truth.frames.entry(f).or_default().insert(text.into());
            }
        }
    }

    fn finish(self) -> (SceneGraphDocument, SegmentTruth) {
        (self.doc, self.truth)
    }
}

pub const PLANTED_SEGMENT: &str = "plaza-000";
const NEAR: &str = "man with backpack is near bicycle";
const LEFT: &str = "man in red leftOf bicycle";
const RIGHT: &str = "man in red rightOf bicycle";

/// Five 40-frame segments of one 2 fps source. Segment `plaza-000` holds the
/// event; the others are decoys:
///
/// - `plaza-001`: the man in red goes right to left (wrong order);
/// - `plaza-002`: left then right only 4 frames apart;
/// - `plaza-003`: left and right are two different men in red;
/// - `plaza-004`: the scene graph reports the right-side relation but the
///   frames do not show it.
///
/// In the planted segment the man in red is labelled "person" by the scene
/// graph and only his crop shows a man in red, so he is found through the
/// image embedding.
pub fn backpack_bicycle_corpus() -> Corpus {
    let fps = Fps::integer(2).expect("positive");
    let seg = |i: u32| SegmentBuilder::new(&format!("plaza-{i:03}"), "plaza", i * 40, 40, fps);
    let mut out = Vec::new();

    let mut b = seg(0);
    b.entity(1, "man with backpack", Some("man with backpack"), 5, 30);
    b.entity(2, "bicycle", Some("bicycle"), 0, 40);
    b.entity(3, "person", Some("man in red"), 8, 24);
    b.entity(4, "dog", None, 0, 12);
    b.relate(10, 20, 1, "near", 2, Some(NEAR));
    b.relate(10, 12, 3, "leftOf", 2, Some(LEFT));
    b.relate(16, 18, 3, "rightOf", 2, Some(RIGHT));
    b.relate(2, 6, 4, "near", 2, Some("dog near bicycle"));
    out.push(b.finish());

    let mut b = seg(1);
    b.entity(1, "man with backpack", Some("man with backpack"), 0, 40);
    b.entity(2, "bicycle", Some("bicycle"), 0, 40);
    b.entity(3, "man in red", Some("man in red"), 5, 30);
    b.relate(8, 22, 1, "near", 2, Some(NEAR));
    b.relate(10, 12, 3, "rightOf", 2, Some(RIGHT));
    b.relate(16, 18, 3, "leftOf", 2, Some(LEFT));
    out.push(b.finish());

    let mut b = seg(2);
    b.entity(1, "man with backpack", Some("man with backpack"), 0, 40);
    b.entity(2, "bicycle", Some("bicycle"), 0, 40);
    b.entity(3, "man in red", None, 5, 30);
    b.relate(8, 22, 1, "near", 2, Some(NEAR));
    b.relate(10, 11, 3, "leftOf", 2, Some(LEFT));
    b.relate(13, 14, 3, "rightOf", 2, Some(RIGHT));
    out.push(b.finish());

    let mut b = seg(3);
    b.entity(1, "man with backpack", Some("man with backpack"), 0, 40);
    b.entity(2, "bicycle", Some("bicycle"), 0, 40);
    b.entity(3, "man in red", Some("man in red"), 5, 14);
    b.entity(5, "man in red", Some("man in red"), 15, 30);
    b.relate(8, 22, 1, "near", 2, Some(NEAR));
    b.relate(10, 12, 3, "leftOf", 2, Some(LEFT));
    b.relate(16, 18, 5, "rightOf", 2, Some(RIGHT));
    out.push(b.finish());

    let mut b = seg(4);
    b.entity(1, "man with backpack", Some("man with backpack"), 0, 40);
    b.entity(2, "bicycle", Some("bicycle"), 0, 40);
    b.entity(3, "man in red", Some("man in red"), 5, 30);
    b.relate(8, 22, 1, "near", 2, Some(NEAR));
    b.relate(10, 12, 3, "leftOf", 2, Some(LEFT));
    b.relate(16, 18, 3, "rightOf", 2, None);
    out.push(b.finish());

    let (docs, truth) = out.into_iter().unzip();
    Corpus { docs, truth }
}

/// Shape of a random corpus. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub segments: (usize, usize),
    pub frames_per_segment: (u32, u32),
    pub entities_per_segment: (u32, u32),
    pub source_videos: usize,
    /// Fraction of a segment each track covers, as `(min, max)`.
    pub track_coverage: (f64, f64),
    /// Chance that an ordered pair of co-present entities is related in a frame.
    pub row_probability: f64,
    /// Chance that a stored row is confirmed by the sidecar.
    pub truth_probability: f64,
    /// Chance that a frame gets a sidecar triple with no stored row.
    pub missed_probability: f64,
    pub crop_probability: f64,
    /// Chance that a crop depicts something other than the detection label.
    pub cross_modal_probability: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            segments: (5, 20),
            frames_per_segment: (50, 200),
            entities_per_segment: (3, 15),
            source_videos: 2,
            track_coverage: (0.1, 0.5),
            row_probability: 0.04,
            truth_probability: 0.7,
            missed_probability: 0.01,
            crop_probability: 0.7,
            cross_modal_probability: 0.15,
        }
    }
}

/// A random corpus over [`VOCABULARY`] and [`RELATIONS`]. Sidecar triple
/// texts use each entity's visual label, so they line up with queries built
/// from the same vocabulary.
pub fn random_corpus(seed: u64, config: &CorpusConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_segments = rng.random_range(config.segments.0..=config.segments.1);
    let fps = Fps::integer(*[2u32, 5, 10].choose(&mut rng).expect("non-empty")).expect("positive");
    let mut next_frame = vec![0u32; config.source_videos.max(1)];
    let mut docs = Vec::with_capacity(n_segments);
    let mut truth = Vec::with_capacity(n_segments);

    for s in 0..n_segments {
        let source = rng.random_range(0..next_frame.len());
        let len = rng.random_range(config.frames_per_segment.0..=config.frames_per_segment.1);
        let vid = format!("s{seed:x}-cam{source}-{s:03}");
        let mut b = SegmentBuilder::new(&vid, &format!("cam{source}"), next_frame[source], len, fps);
        next_frame[source] += len;

        let n_entities = rng.random_range(config.entities_per_segment.0..=config.entities_per_segment.1);
        let mut visual = BTreeMap::new();
        let mut tracks = Vec::new();
        for eid in 1..=n_entities {
            let label = *VOCABULARY.choose(&mut rng).expect("non-empty");
            let cover = rng.random_range(config.track_coverage.0..=config.track_coverage.1);
            let span = ((f64::from(len) * cover).round() as u32).clamp(1, len);
            let from = rng.random_range(0..=len - span);
            let crop = rng.random_bool(config.crop_probability).then(|| {
                if rng.random_bool(config.cross_modal_probability) {
                    *VOCABULARY.choose(&mut rng).expect("non-empty")
                } else {
                    label
                }
            });
            b.entity(eid, label, crop, from, from + span);
            visual.insert(eid, crop.unwrap_or(label));
            tracks.push((eid, from, from + span));
        }

        let base = b.base();
        for f in 0..len {
            let present: Vec<EntityId> = tracks.iter().filter(|(_, a, z)| (*a..*z).contains(&f)).map(|t| t.0).collect();
            for &sid in &present {
                for &oid in &present {
                    if sid == oid || !rng.random_bool(config.row_probability) {
                        continue;
                    }
                    let rl = *RELATIONS.choose(&mut rng).expect("non-empty");
                    let text = format!("{} {rl} {}", visual[&sid], visual[&oid]);
                    let holds = rng.random_bool(config.truth_probability);
                    b.relate(f, f, sid, rl, oid, holds.then_some(text.as_str()));
                }
            }
            if present.len() >= 2 && rng.random_bool(config.missed_probability) {
                let (sid, oid) = (present[0], present[1]);
                let rl = *RELATIONS.choose(&mut rng).expect("non-empty");
                b.truth.frames.entry(base + f).or_default().insert(format!("{} {rl} {}", visual[&sid], visual[&oid]));
            }
        }
        let (d, t) = b.finish();
        docs.push(d);
        truth.push(t);
    }
    Corpus { docs, truth }
}

struct QueryDraft {
    entities: Vec<EntityDecl>,
    relationships: Vec<RelationDecl>,
}

impl QueryDraft {
    /// Key for `text`, reusing an existing one unless it equals `avoid`.
    fn entity_key(&mut self, text: &str, avoid: Option<&str>) -> String {
        if let Some(e) = self.entities.iter().find(|e| e.text == text && Some(e.key.as_str()) != avoid) {
            return e.key.clone();
        }
        let key = format!("e{}", self.entities.len() + 1);
        self.entities.push(EntityDecl { key: key.clone(), text: text.into() });
        key
    }

    fn rel_key(&mut self, text: &str) -> String {
        if let Some(r) = self.relationships.iter().find(|r| r.text == text) {
            return r.key.clone();
        }
        let key = format!("r{}", self.relationships.len() + 1);
        self.relationships.push(RelationDecl { key: key.clone(), text: text.into() });
        key
    }
}

/// A random valid query: 1-3 frames of 1-3 triples, 0-2 constraints. Most
/// queries are seeded from rows of a random segment so they have a fair
/// chance of matching.
pub fn random_query(rng: &mut impl Rng, corpus: &Corpus) -> QuerySpec {
    loop {
        let q = draft_query(rng, corpus);
        if validate_query(&q).is_valid() {
            return q;
        }
    }
}

fn draft_query(rng: &mut impl Rng, corpus: &Corpus) -> QuerySpec {
    let mut draft = QueryDraft { entities: Vec::new(), relationships: Vec::new() };
    let n_frames = rng.random_range(1..=3usize);
    let seeded = !corpus.docs.is_empty() && rng.random_bool(0.8);
    let doc_index = rng.random_range(0..corpus.docs.len().max(1));
    // only rows the sidecar confirms, so seeded triples can pass refinement
    let confirmed = |t: &&ObservedTriple| {
        let (Some(s), Some(o)) = (corpus.visual_label(doc_index, t.sid), corpus.visual_label(doc_index, t.oid)) else { return false };
        let text = format!("{s} {} {o}", t.rl);
        corpus.truth[doc_index].frames.get(&t.fid).is_some_and(|f| f.contains(&text))
    };
    let mut rows: Vec<&ObservedTriple> =
        if seeded { corpus.docs[doc_index].triples.iter().filter(confirmed).collect() } else { Vec::new() };
    rows.sort_by_key(|t| t.fid);

    let mut frames = Vec::with_capacity(n_frames);
    let mut cursor = 0usize;
    let mut anchor_fids: Vec<Option<i64>> = Vec::with_capacity(n_frames);
    for index in 0..n_frames {
        let n_triples = rng.random_range(1..=3usize);
        let mut triples = Vec::with_capacity(n_triples);
        let anchor = (cursor < rows.len()).then(|| rng.random_range(cursor..rows.len()));
        for _ in 0..n_triples {
            let (s_text, rl, o_text) = match anchor {
                Some(a) => {
                    // prefer rows in the anchor frame, so the conjunction can succeed
                    let fid = rows[a].fid;
                    let same: Vec<&&ObservedTriple> = rows.iter().filter(|t| t.fid == fid).collect();
                    let row = if rng.random_bool(0.8) { **same.choose(rng).expect("anchor row") } else { *rows.choose(rng).expect("rows") };
                    let s = corpus.visual_label(doc_index, row.sid).expect("known entity");
                    let o = corpus.visual_label(doc_index, row.oid).expect("known entity");
                    (s.to_owned(), row.rl.clone(), o.to_owned())
                }
                None => (
                    (*VOCABULARY.choose(rng).expect("non-empty")).to_owned(),
                    (*RELATIONS.choose(rng).expect("non-empty")).to_owned(),
                    (*VOCABULARY.choose(rng).expect("non-empty")).to_owned(),
                ),
            };
            let subject = draft.entity_key(&s_text, None);
            let object = draft.entity_key(&o_text, Some(&subject));
            let rel = draft.rel_key(&rl);
            triples.push(TripleRef { subject, rel, object });
        }
        anchor_fids.push(anchor.map(|a| i64::from(rows[a].fid)));
        if let Some(a) = anchor {
            let fid = rows[a].fid;
            cursor = rows.partition_point(|t| t.fid <= fid);
        }
        frames.push(FrameSpec { index, triples });
    }

    let ops = [TemporalOp::Lt, TemporalOp::Le, TemporalOp::Gt, TemporalOp::Ge, TemporalOp::Eq];
    let mut temporal = Vec::new();
    if n_frames >= 2 {
        for _ in 0..rng.random_range(0..=2usize) {
            let a = rng.random_range(0..n_frames);
            let b = (a + rng.random_range(1..n_frames)) % n_frames;
            let (later, earlier) = if rng.random_bool(0.85) { (a.max(b), a.min(b)) } else { (a.min(b), a.max(b)) };
            let op = *ops.choose(rng).expect("non-empty");
            let bound = match (anchor_fids[later], anchor_fids[earlier]) {
                // usually a bound the anchor frames satisfy
                (Some(l), Some(e)) if rng.random_bool(0.7) => {
                    let d = l - e;
                    match op {
                        TemporalOp::Lt => d + rng.random_range(1..=5),
                        TemporalOp::Le => d + rng.random_range(0..=5),
                        TemporalOp::Gt => d - rng.random_range(1..=5),
                        TemporalOp::Ge => d - rng.random_range(0..=5),
                        TemporalOp::Eq => d,
                    }
                }
                _ if later > earlier => rng.random_range(0..=30),
                _ => -rng.random_range(1..=30),
            };
            temporal.push(TemporalConstraint { later, earlier, op, bound });
        }
    }
    QuerySpec { entities: draft.entities, relationships: draft.relationships, frames, temporal }
}

/// Random hyperparameters around the defaults, with an unlimited result cap.
pub fn random_params(rng: &mut impl Rng) -> HyperParams {
    HyperParams {
        top_k: usize::MAX,
        temperature: *[0.0, 0.0, 0.2, 0.4].choose(rng).expect("non-empty"),
        text_threshold: *[0.7, 0.8, 0.9].choose(rng).expect("non-empty"),
        image_threshold: *[0.7, 0.8, 0.95].choose(rng).expect("non-empty"),
        rel_label_threshold: rng.random_bool(0.2).then_some(0.9),
    }
}

/// Labels sharing no token with the backpack/bicycle query texts.
pub const BACKGROUND: &[&str] = &["tree", "bench", "bus", "traffic light", "umbrella", "suitcase", "dog", "woman", "child"];

/// Ten 100-frame segments crowded with background entities that relate to
/// each other densely, plus two short scenes where the backpack/bicycle
/// event entities appear. Event entities cover only a few percent of frames.
pub fn sparse_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fps = Fps::integer(2).expect("positive");
    let mut docs = Vec::new();
    let mut truth = Vec::new();
    for s in 0..10u32 {
        let mut b = SegmentBuilder::new(&format!("street-{s:03}"), "street", s * 100, 100, fps);
        let n_background = rng.random_range(6..=10u32);
        let mut tracks = Vec::new();
        for eid in 1..=n_background {
            let label = *BACKGROUND.choose(&mut rng).expect("non-empty");
            let from = rng.random_range(0..50);
            let to = rng.random_range(from + 20..=100);
            b.entity(eid, label, Some(label), from, to);
            tracks.push((eid, label, from, to));
        }
        for f in 0..100 {
            let present: Vec<_> = tracks.iter().filter(|t| (t.2..t.3).contains(&f)).collect();
            for s_ in &present {
                for o in &present {
                    if s_.0 != o.0 && rng.random_bool(0.08) {
                        let rl = *RELATIONS.choose(&mut rng).expect("non-empty");
                        let text = format!("{} {rl} {}", s_.1, o.1);
                        b.relate(f, f, s_.0, rl, o.0, Some(&text));
                    }
                }
            }
        }
        if s == 3 || s == 7 {
            let start = rng.random_range(10..60);
            b.entity(101, "man with backpack", Some("man with backpack"), start, start + 14);
            b.entity(102, "bicycle", Some("bicycle"), start, start + 14);
            b.entity(103, "man in red", Some("man in red"), start, start + 14);
            b.relate(start, start + 13, 101, "near", 102, Some(NEAR));
            b.relate(start + 1, start + 3, 103, "leftOf", 102, Some(LEFT));
            b.relate(start + 9, start + 12, 103, "rightOf", 102, Some(RIGHT));
            b.relate(start + 5, start + 6, 103, "rightOf", 102, None);
        }
        let (d, t) = b.finish();
        docs.push(d);
        truth.push(t);
    }
    Corpus { docs, truth }
}

/// Labels of every entity in a corpus, deduplicated.
pub fn corpus_labels(corpus: &Corpus) -> BTreeSet<String> {
    corpus.docs.iter().flat_map(|d| d.detections.iter().map(|x| x.label.clone())).collect()
}
