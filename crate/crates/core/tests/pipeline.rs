use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use scenequery_core::backends::mock::{MockEmbedder, MockVerifier, DEFAULT_SEED};
use scenequery_core::backends::{
    BackendError, CountingVerifier, Embedder, EmbeddingBackendDescriptor, ImageEmbedding, Modality, RecordingEmbedder,
    Verifier, VerifierRequest,
};
use scenequery_core::engine::{result_order, EngineConfig, Stage, VerifierFailurePolicy};
use scenequery_core::synth::{backpack_bicycle_corpus, Corpus, BACKPACK_BICYCLE_QUERY, PLANTED_SEGMENT};
use scenequery_core::{execute_query, parse_query, Dataset, EngineError, HyperParams, QueryEngine, QuerySpec};

const DIM: usize = 96;

fn fixture() -> (Corpus, MockEmbedder, MockVerifier, Dataset) {
    let corpus = backpack_bicycle_corpus();
    let embedder = corpus.embedder(DEFAULT_SEED, DIM);
    let verifier = MockVerifier::new(Arc::new(corpus.ground_truth().unwrap()));
    let dataset = corpus.ingest(&embedder);
    (corpus, embedder, verifier, dataset)
}

fn backpack() -> QuerySpec {
    parse_query(BACKPACK_BICYCLE_QUERY).unwrap()
}

fn all() -> HyperParams {
    HyperParams { top_k: usize::MAX, ..HyperParams::default() }
}

struct FailingText<E>(E);

impl<E: Embedder> Embedder for FailingText<E> {
    fn descriptor(&self, m: Modality) -> EmbeddingBackendDescriptor {
        self.0.descriptor(m)
    }
    fn embed_text(&self, _: &str) -> Result<Vec<f32>, BackendError> {
        Err(BackendError::Timeout)
    }
    fn embed_image(&self, l: &str) -> Result<ImageEmbedding, BackendError> {
        self.0.embed_image(l)
    }
}

/// Fails every request whose triple text contains `needle`.
struct FlakyVerifier<V> {
    inner: V,
    needle: &'static str,
    failures: AtomicUsize,
}

impl<V: Verifier> Verifier for FlakyVerifier<V> {
    fn verify(&self, r: &VerifierRequest) -> Result<f64, BackendError> {
        if r.triple_text.contains(self.needle) {
            self.failures.fetch_add(1, Ordering::Relaxed);
            return Err(BackendError::Status(503));
        }
        self.inner.verify(r)
    }
}

struct Constant(f64);

impl Verifier for Constant {
    fn verify(&self, _: &VerifierRequest) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

#[test]
fn default_top_k_is_sorted_prefix() {
    let (_, e, v, ds) = fixture();
    let engine = QueryEngine::with_workers(2).unwrap();
    let full = engine.execute(&ds, &e, &v, &backpack(), &all()).unwrap();
    let top = engine.execute(&ds, &e, &v, &backpack(), &HyperParams::default()).unwrap();
    assert_eq!(top.results.len(), 3);
    assert_eq!(top.results[..], full.results[..3]);
    assert!(full.results.windows(2).all(|w| result_order(&w[0], &w[1]).is_le()));
    assert_eq!(top.report.assignments, full.report.assignments);
    assert_eq!(top.report.returned, 3);
    for r in &full.results {
        assert_eq!(r.vid, PLANTED_SEGMENT);
        assert!(r.score > 0.0 && r.score <= 1.0);
        // one evidence entry per triple occurrence
        assert_eq!(r.triple_evidence.len(), 4);
    }
}

#[test]
fn report_exposes_relational_filters() {
    let (_, e, v, ds) = fixture();
    let out = execute_query(&ds, &e, &v, &backpack(), &all()).unwrap();
    let r = &out.report;
    assert_eq!(r.total_segments, 5);
    assert_eq!(r.total_frames, 200);
    assert_eq!(r.triples.len(), 3);
    // e1 and e3 are subjects, e2 is an object
    assert_eq!(r.filters.len(), 3);
    assert!(r.filters.iter().all(|f| f.contains(" IN ")), "{:?}", r.filters);
    assert_eq!(r.frame_bindings.len(), 2);
    assert!(r.triples.iter().all(|t| t.verified_pairs <= t.coarse_pairs));
}

#[test]
fn absent_entity_never_reaches_the_verifier() {
    let (_, e, v, ds) = fixture();
    let q = parse_query(
        r#"{"entities": [{"key": "a", "text": "giraffe wearing sunglasses"}, {"key": "b", "text": "bicycle"}],
            "relationships": [{"key": "r", "text": "near"}],
            "frames": [{"index": 0, "triples": [["a", "r", "b"]]}]}"#,
    )
    .unwrap();
    let counting = CountingVerifier::new(v);
    let out = execute_query(&ds, &e, &counting, &q, &all()).unwrap();
    assert!(out.results.is_empty());
    assert_eq!(out.report.entity_candidates["a"], 0);
    assert_eq!(counting.calls(), 0);
    assert_eq!(out.report.coarse_pairs, 0);
}

#[test]
fn invalid_query_is_rejected_before_any_backend_call() {
    let (_, e, v, ds) = fixture();
    let rec = RecordingEmbedder::new(e);
    let counting = CountingVerifier::new(v);
    let mut q = backpack();
    q.frames[0].triples[0].subject = "nobody".into();
    let err = execute_query(&ds, &rec, &counting, &q, &all()).unwrap_err();
    assert!(matches!(err, EngineError::InvalidQuery(_)), "{err}");
    assert!(err.stage().is_none());
    assert!(rec.text_calls().is_empty());
    assert_eq!(counting.calls(), 0);

    let bad = HyperParams { temperature: 1.0, ..HyperParams::default() };
    let err = execute_query(&ds, &rec, &counting, &backpack(), &bad).unwrap_err();
    assert!(matches!(err, EngineError::InvalidParams(_)));
    assert!(rec.text_calls().is_empty());
}

#[test]
fn embedder_failure_is_tagged_with_its_stage() {
    let (_, e, v, ds) = fixture();
    let err = execute_query(&ds, &FailingText(e), &v, &backpack(), &all()).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::EntityMatching));
    assert!(err.to_string().contains("entity matching"));
}

#[test]
fn verifier_failures_drop_or_abort() {
    let (_, e, v, ds) = fixture();
    let flaky = FlakyVerifier { inner: v, needle: "rightOf", failures: AtomicUsize::new(0) };

    let dropping = QueryEngine::new(EngineConfig { workers: 2, ..EngineConfig::default() }).unwrap();
    let out = dropping.execute(&ds, &e, &flaky, &backpack(), &all()).unwrap();
    assert!(out.results.is_empty(), "the second frame can no longer be confirmed");
    assert!(out.report.verifier_failures > 0);
    assert!(out.report.frame_bindings[0] > 0);
    assert_eq!(out.report.frame_bindings[1], 0);

    let aborting = QueryEngine::new(EngineConfig {
        workers: 2,
        on_verifier_error: VerifierFailurePolicy::Abort,
        ..EngineConfig::default()
    })
    .unwrap();
    let err = aborting.execute(&ds, &e, &flaky, &backpack(), &all()).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Refinement));
}

#[test]
fn confidence_gate_and_range() {
    let (_, e, _, ds) = fixture();
    let low = execute_query(&ds, &e, &Constant(0.49), &backpack(), &all()).unwrap();
    assert!(low.results.is_empty());
    let half = execute_query(&ds, &e, &Constant(0.5), &backpack(), &all()).unwrap();
    assert!(!half.results.is_empty());
    // accepting everything admits the decoys the sidecar rejected
    let vids: BTreeSet<_> = half.results.iter().map(|r| r.vid.as_str()).collect();
    assert!(vids.len() > 1, "{vids:?}");
    assert!(half.results.iter().all(|r| r.triple_evidence.iter().all(|t| t.confidence == 0.5)));

    // out-of-range confidences count as failures
    let out = execute_query(&ds, &e, &Constant(1.5), &backpack(), &all()).unwrap();
    assert!(out.results.is_empty());
    assert_eq!(out.report.verifier_failures, out.report.coarse_pairs);
}

#[test]
fn relaxing_temperature_only_adds_results() {
    let (_, e, v, ds) = fixture();
    let keys = |t: f64| -> BTreeSet<_> {
        let p = HyperParams { temperature: t, ..all() };
        execute_query(&ds, &e, &v, &backpack(), &p)
            .unwrap()
            .results
            .into_iter()
            .map(|r| (r.vid, r.frame_assignment, r.entity_bindings))
            .collect()
    };
    let mut prev = keys(0.0);
    for t in [0.1, 0.3, 0.5] {
        let next = keys(t);
        assert!(prev.is_subset(&next), "temperature {t}");
        prev = next;
    }
}

#[test]
fn repeated_triple_is_verified_once() {
    let (_, e, v, ds) = fixture();
    let one = parse_query(
        r#"{"entities": [{"key": "m", "text": "man with backpack"}, {"key": "b", "text": "bicycle"}],
            "relationships": [{"key": "n", "text": "is near"}],
            "frames": [{"index": 0, "triples": [["m", "n", "b"]]}]}"#,
    )
    .unwrap();
    let mut two = one.clone();
    two.frames.push(scenequery_core::model::FrameSpec { index: 1, triples: one.frames[0].triples.clone() });
    let c1 = CountingVerifier::new(v.clone());
    let c2 = CountingVerifier::new(v);
    let o1 = execute_query(&ds, &e, &c1, &one, &all()).unwrap();
    let o2 = execute_query(&ds, &e, &c2, &two, &all()).unwrap();
    assert_eq!(c1.calls(), c2.calls());
    assert_eq!(o1.report.coarse_pairs, o2.report.coarse_pairs);
    // 11 confirmed near frames in the planted segment and 15 in each decoy;
    // two frames pick an increasing pair within one segment
    assert_eq!(o1.results.len(), 11 + 4 * 15);
    assert_eq!(o2.results.len(), 55 + 4 * 105);
}

#[test]
fn outcome_serializes() {
    let (_, e, v, ds) = fixture();
    let out = execute_query(&ds, &e, &v, &backpack(), &HyperParams::default()).unwrap();
    let json = serde_json::to_value(&out).unwrap();
    assert_eq!(json["results"].as_array().unwrap().len(), 3);
    assert!(json["report"]["timings"]["total_ms"].is_number());
    assert_eq!(json["results"][0]["vid"], PLANTED_SEGMENT);
}
