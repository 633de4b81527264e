//! Verifier-based refinement of coarse candidate pairs.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Verifier, VerifierRequest};
use crate::dataset::Dataset;
use crate::model::{EntityId, FrameId, SegmentId};
use crate::store::CandidatePair;

/// Pairs at or above this confidence survive refinement.
pub const ACCEPT_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifierFailurePolicy {
    /// Drop the failing pair and log a warning.
    #[default]
    Drop,
    /// Fail the whole query.
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedPair {
    #[serde(flatten)]
    pub pair: CandidatePair,
    pub confidence: f64,
}

/// Resolves a frame to the image locator handed to the verifier.
pub trait FrameLocator: Sync {
    fn locate(&self, vid: &str, fid: FrameId) -> String;
}

impl FrameLocator for Dataset {
    fn locate(&self, vid: &str, fid: FrameId) -> String {
        match self.segment(vid) {
            Some(seg) => seg.frame_locator(fid),
            None => format!("frame://{vid}/{fid}"),
        }
    }
}

impl<F: Fn(&str, FrameId) -> String + Sync> FrameLocator for F {
    fn locate(&self, vid: &str, fid: FrameId) -> String {
        self(vid, fid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VerificationKey {
    pub vid: SegmentId,
    pub fid: FrameId,
    pub sid: EntityId,
    pub oid: EntityId,
    pub triple_text: String,
}

impl VerificationKey {
    pub fn of(pair: &CandidatePair, triple_text: &str) -> Self {
        Self { vid: pair.vid.clone(), fid: pair.fid, sid: pair.sid, oid: pair.oid, triple_text: triple_text.to_owned() }
    }
}

/// Per-query memo of verifier outcomes. `None` marks a dropped failure.
#[derive(Debug, Default)]
pub struct VerificationCache {
    outcomes: HashMap<VerificationKey, Option<f64>>,
    calls: usize,
    failures: usize,
}

fn checked(c: f64) -> Result<f64, BackendError> {
    if c.is_finite() && (0.0..=1.0).contains(&c) {
        Ok(c)
    } else {
        Err(BackendError::Parse(format!("confidence {c} outside [0, 1]")))
    }
}

impl VerificationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Distinct requests sent to the verifier so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn get(&self, key: &VerificationKey) -> Option<Option<f64>> {
        self.outcomes.get(key).copied()
    }

    fn record(&mut self, key: VerificationKey, outcome: Result<f64, BackendError>, policy: VerifierFailurePolicy) -> Result<(), BackendError> {
        self.calls += 1;
        let value = match outcome {
            Ok(c) => Some(c),
            Err(e) if policy == VerifierFailurePolicy::Abort => return Err(e),
            Err(e) => {
                tracing::warn!(vid = %key.vid, fid = key.fid, triple = %key.triple_text, error = %e, "verifier failed; dropping pair");
                self.failures += 1;
                None
            }
        };
        self.outcomes.insert(key, value);
        Ok(())
    }

    /// Verifies every key not yet cached, `chunk` requests per batch, with
    /// batches spread over the current rayon pool. Keys are processed in
    /// sorted order so failures surface deterministically.
    pub fn prefetch(
        &mut self,
        keys: BTreeSet<VerificationKey>,
        verifier: &dyn Verifier,
        frames: &dyn FrameLocator,
        policy: VerifierFailurePolicy,
        chunk: usize,
    ) -> Result<(), BackendError> {
        let todo: Vec<VerificationKey> = keys.into_iter().filter(|k| !self.outcomes.contains_key(k)).collect();
        let results: Vec<Vec<Result<f64, BackendError>>> = todo
            .par_chunks(chunk.max(1))
            .map(|batch| {
                let requests: Vec<VerifierRequest> = batch
                    .iter()
                    .map(|k| VerifierRequest {
                        locator: frames.locate(&k.vid, k.fid),
                        triple_text: k.triple_text.clone(),
                        vid: k.vid.clone(),
                        fid: k.fid,
                    })
                    .collect();
                match verifier.verify_batch(&requests) {
                    Ok(cs) if cs.len() == requests.len() => cs.into_iter().map(checked).collect(),
                    Ok(cs) => {
                        let e = BackendError::Parse(format!("{} confidences for {} requests", cs.len(), requests.len()));
                        vec![Err(e); requests.len()]
                    }
                    // isolate the failing requests
                    Err(_) => requests.iter().map(|r| verifier.verify(r).and_then(checked)).collect(),
                }
            })
            .collect();
        for (key, outcome) in todo.into_iter().zip(results.into_iter().flatten()) {
            self.record(key, outcome, policy)?;
        }
        Ok(())
    }
}

/// Verifies each distinct `(vid, fid, sid, oid, triple_text)` once, keeping
/// pairs with confidence at least [`ACCEPT_CONFIDENCE`]. Pairs differing only
/// in stored label collapse to the first. Input order is preserved.
pub fn refine_relationships(
    pairs: &[CandidatePair],
    triple_text: &str,
    verifier: &dyn Verifier,
    frames: &dyn FrameLocator,
    cache: &mut VerificationCache,
    policy: VerifierFailurePolicy,
) -> Result<Vec<VerifiedPair>, BackendError> {
    let mut out = Vec::new();
    let mut emitted = BTreeSet::new();
    for pair in pairs {
        let key = VerificationKey::of(pair, triple_text);
        if !emitted.insert(key.clone()) {
            continue;
        }
        let outcome = match cache.get(&key) {
            Some(outcome) => outcome,
            None => {
                let req = VerifierRequest {
                    locator: frames.locate(&pair.vid, pair.fid),
                    triple_text: triple_text.to_owned(),
                    vid: pair.vid.clone(),
                    fid: pair.fid,
                };
                cache.record(key.clone(), verifier.verify(&req).and_then(checked), policy)?;
                cache.get(&key).expect("just recorded")
            }
        };
        if let Some(confidence) = outcome.filter(|c| *c >= ACCEPT_CONFIDENCE) {
            out.push(VerifiedPair { pair: pair.clone(), confidence });
        }
    }
    Ok(out)
}
