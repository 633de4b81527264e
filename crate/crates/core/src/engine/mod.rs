//! The staged query pipeline.
//!
//! 1. entity matching: one vector search per query entity;
//! 2. candidate retrieval: relational filters on `(vid, sid)` / `(vid, oid)`;
//! 3. relationship join on the stored row;
//! 4. verifier refinement of the surviving pairs;
//! 5. per-frame conjunction, then temporal matching within each segment.
//!
//! Every stage fans out over a dedicated rayon pool and merges through
//! sorted reductions, so the worker count never changes the output.

mod conjoin;
mod refine;
mod score;
mod temporal;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use conjoin::{conjoin_frame, FrameBinding};
pub use refine::{
    refine_relationships, FrameLocator, VerificationCache, VerificationKey, VerifiedPair, VerifierFailurePolicy,
    ACCEPT_CONFIDENCE,
};
pub use score::score_result;
pub use temporal::{match_temporal, TemporalMatch};

use crate::backends::{BackendError, Embedder, Verifier};
use crate::dataset::Dataset;
use crate::model::{
    validate_query, HyperParamError, HyperParams, MatchResult, QuerySpec, TripleEvidence, TripleRef, ValidationReport,
};
use crate::store::{join_triple, CandidatePair, EntityMatch, EntityStore, FilterPredicate, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EntityMatching,
    CandidateRetrieval,
    Join,
    Refinement,
    Conjunction,
    Temporal,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::EntityMatching => "entity matching",
            Stage::CandidateRetrieval => "candidate retrieval",
            Stage::Join => "join",
            Stage::Refinement => "refinement",
            Stage::Conjunction => "conjunction",
            Stage::Temporal => "temporal matching",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid query:\n{0}")]
    InvalidQuery(ValidationReport),
    #[error("invalid parameters: {0}")]
    InvalidParams(#[from] HyperParamError),
    #[error("{stage} stage failed: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

impl EngineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            EngineError::Backend { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

fn at(stage: Stage) -> impl Fn(BackendError) -> EngineError {
    move |source| EngineError::Backend { stage, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Worker threads; 0 picks the number of available cores.
    pub workers: usize,
    pub on_verifier_error: VerifierFailurePolicy,
    /// Requests per verifier batch.
    pub verify_batch: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { workers: 0, on_verifier_error: VerifierFailurePolicy::Drop, verify_batch: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub entity_matching_ms: f64,
    pub candidate_retrieval_ms: f64,
    pub join_ms: f64,
    pub refinement_ms: f64,
    pub conjunction_ms: f64,
    pub temporal_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleReport {
    pub triple: TripleRef,
    pub triple_text: String,
    pub subject_rows: usize,
    pub object_rows: usize,
    pub coarse_pairs: usize,
    pub verified_pairs: usize,
}

/// Per-stage counters of one execution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub total_segments: usize,
    pub total_frames: usize,
    pub total_entities: usize,
    pub total_rows: usize,
    pub entity_candidates: BTreeMap<String, usize>,
    pub triples: Vec<TripleReport>,
    /// Distinct `(vid, fid, sid, oid, triple_text)` keys left after the join.
    pub coarse_pairs: usize,
    pub verifier_calls: usize,
    pub verifier_failures: usize,
    pub frame_bindings: Vec<usize>,
    pub assignments: usize,
    pub returned: usize,
    /// Relational filters issued during candidate retrieval.
    pub filters: Vec<String>,
    pub workers: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub results: Vec<MatchResult>,
    pub report: ExecutionReport,
}

pub struct QueryEngine {
    pool: rayon::ThreadPool,
    config: EngineConfig,
}

impl fmt::Debug for QueryEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QueryEngine").field("workers", &self.workers()).field("config", &self.config).finish()
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One independent search per declared entity, in parallel on the current
/// pool. Keys map to possibly empty candidate lists.
pub fn match_entities(
    q: &QuerySpec,
    store: &EntityStore,
    embedder: &dyn Embedder,
    params: &HyperParams,
) -> Result<BTreeMap<String, Vec<EntityMatch>>, BackendError> {
    q.entities
        .par_iter()
        .map(|e| store.search_entities(&e.text, embedder, params).map(|m| (e.key.clone(), m)))
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().collect())
}

/// Total order on results: score descending, then vid, first frame id,
/// full assignment and bindings ascending.
pub fn result_order(a: &MatchResult, b: &MatchResult) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.vid.cmp(&b.vid))
        .then_with(|| a.frame_assignment.first().cmp(&b.frame_assignment.first()))
        .then_with(|| a.frame_assignment.cmp(&b.frame_assignment))
        .then_with(|| a.entity_bindings.cmp(&b.entity_bindings))
}

struct Coarse {
    triple: TripleRef,
    text: String,
    subject_rows: usize,
    object_rows: usize,
    pairs: Vec<CandidatePair>,
}

impl QueryEngine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .thread_name(|i| format!("scenequery-{i}"))
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?;
        Ok(Self { pool, config })
    }

    pub fn with_workers(workers: usize) -> Result<Self, EngineError> {
        Self::new(EngineConfig { workers, ..EngineConfig::default() })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Runs the whole pipeline. The query and parameters are validated
    /// before any backend call.
    pub fn execute(
        &self,
        dataset: &Dataset,
        embedder: &dyn Embedder,
        verifier: &dyn Verifier,
        q: &QuerySpec,
        params: &HyperParams,
    ) -> Result<QueryOutcome, EngineError> {
        params.validate()?;
        let findings = validate_query(q);
        if !findings.is_valid() {
            return Err(EngineError::InvalidQuery(findings));
        }
        self.pool.install(|| self.run(dataset, embedder, verifier, q, params))
    }

    fn run(
        &self,
        dataset: &Dataset,
        embedder: &dyn Embedder,
        verifier: &dyn Verifier,
        q: &QuerySpec,
        params: &HyperParams,
    ) -> Result<QueryOutcome, EngineError> {
        let started = Instant::now();
        let mut report = ExecutionReport {
            total_segments: dataset.segment_count(),
            total_frames: dataset.total_frames(),
            total_entities: dataset.entities().len(),
            total_rows: dataset.relationships().len(),
            workers: self.workers(),
            ..ExecutionReport::default()
        };

        let t = Instant::now();
        let matches = match_entities(q, dataset.entities(), embedder, params).map_err(at(Stage::EntityMatching))?;
        report.entity_candidates = matches.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        report.timings.entity_matching_ms = elapsed_ms(t);

        // candidate retrieval, one relational filter per (entity, role)
        let t = Instant::now();
        let triples: Vec<&TripleRef> = q.distinct_triples();
        let mut roles: BTreeSet<(&str, u8)> = BTreeSet::new();
        for tr in &triples {
            roles.insert((tr.subject.as_str(), 0));
            roles.insert((tr.object.as_str(), 1));
        }
        let role_of = |r: u8| if r == 0 { Role::Subject } else { Role::Object };
        let rows: HashMap<(&str, u8), Vec<&crate::model::RelationshipRow>> = roles
            .par_iter()
            .map(|&(key, r)| ((key, r), dataset.relationships().candidate_frames(&matches[key], role_of(r))))
            .collect();
        report.filters = roles.iter().map(|&(key, r)| FilterPredicate::new(key, role_of(r), &matches[key]).to_string()).collect();
        report.timings.candidate_retrieval_ms = elapsed_ms(t);

        let t = Instant::now();
        let coarse: Vec<Coarse> = triples
            .par_iter()
            .map(|tr| {
                let text = q.triple_text(tr).expect("validated query");
                let rel_text = q.relation_text(&tr.rel).expect("validated query");
                let (s_rows, o_rows) = (&rows[&(tr.subject.as_str(), 0)], &rows[&(tr.object.as_str(), 1)]);
                let pairs = join_triple(s_rows, o_rows, &matches[&tr.subject], &matches[&tr.object], rel_text, embedder, params)?;
                Ok(Coarse { triple: (*tr).clone(), text, subject_rows: s_rows.len(), object_rows: o_rows.len(), pairs })
            })
            .collect::<Result<Vec<_>, BackendError>>()
            .map_err(at(Stage::Join))?;
        report.timings.join_ms = elapsed_ms(t);

        let t = Instant::now();
        let keys: BTreeSet<VerificationKey> =
            coarse.iter().flat_map(|c| c.pairs.iter().map(|p| VerificationKey::of(p, &c.text))).collect();
        report.coarse_pairs = keys.len();
        let policy = self.config.on_verifier_error;
        let mut cache = VerificationCache::new();
        cache.prefetch(keys, verifier, dataset, policy, self.config.verify_batch).map_err(at(Stage::Refinement))?;
        let mut verified: HashMap<TripleRef, Vec<VerifiedPair>> = HashMap::new();
        for c in &coarse {
            let kept = refine_relationships(&c.pairs, &c.text, verifier, dataset, &mut cache, policy)
                .map_err(at(Stage::Refinement))?;
            report.triples.push(TripleReport {
                triple: c.triple.clone(),
                triple_text: c.text.clone(),
                subject_rows: c.subject_rows,
                object_rows: c.object_rows,
                coarse_pairs: c.pairs.len(),
                verified_pairs: kept.len(),
            });
            verified.insert(c.triple.clone(), kept);
        }
        report.verifier_calls = cache.calls();
        report.verifier_failures = cache.failures();
        report.timings.refinement_ms = elapsed_ms(t);

        let t = Instant::now();
        let per_frame: Vec<Vec<FrameBinding>> = q.frames.par_iter().map(|fs| conjoin_frame(fs, &verified)).collect();
        report.frame_bindings = per_frame.iter().map(Vec::len).collect();
        report.timings.conjunction_ms = elapsed_ms(t);

        let t = Instant::now();
        let assignments = match_temporal(&per_frame, &q.temporal);
        report.assignments = assignments.len();

        let similarity: HashMap<(&str, &str, u32), f64> = matches
            .iter()
            .flat_map(|(k, ms)| ms.iter().map(move |m| ((k.as_str(), m.vid.as_str(), m.eid), m.combined_score)))
            .collect();
        let mut results: Vec<MatchResult> = assignments
            .into_par_iter()
            .map(|a| {
                let mut evidence = Vec::new();
                for (pos, &pick) in a.picks.iter().enumerate() {
                    let fb = &per_frame[pos][pick];
                    for (triple, confidence) in q.frames[pos].triples.iter().zip(&fb.confidences) {
                        evidence.push(TripleEvidence {
                            frame_index: pos,
                            triple: triple.clone(),
                            subject_eid: fb.entity_bindings[&triple.subject],
                            object_eid: fb.entity_bindings[&triple.object],
                            confidence: *confidence,
                        });
                    }
                }
                let sims: Vec<f64> = a
                    .entity_bindings
                    .iter()
                    .map(|(k, e)| similarity[&(k.as_str(), a.vid.as_str(), *e)])
                    .collect();
                let confs: Vec<f64> = evidence.iter().map(|e| e.confidence).collect();
                MatchResult {
                    score: score_result(&sims, &confs),
                    vid: a.vid,
                    frame_assignment: a.frame_assignment,
                    entity_bindings: a.entity_bindings,
                    triple_evidence: evidence,
                }
            })
            .collect();
        results.sort_by(result_order);
        results.truncate(params.top_k);
        report.returned = results.len();
        report.timings.temporal_ms = elapsed_ms(t);
        report.timings.total_ms = elapsed_ms(started);

        tracing::debug!(
            coarse = report.coarse_pairs,
            verifier_calls = report.verifier_calls,
            assignments = report.assignments,
            "query executed"
        );
        Ok(QueryOutcome { results, report })
    }
}

/// Runs a query on a fresh engine with default configuration.
pub fn execute_query(
    dataset: &Dataset,
    embedder: &dyn Embedder,
    verifier: &dyn Verifier,
    q: &QuerySpec,
    params: &HyperParams,
) -> Result<QueryOutcome, EngineError> {
    QueryEngine::new(EngineConfig::default())?.execute(dataset, embedder, verifier, q, params)
}
