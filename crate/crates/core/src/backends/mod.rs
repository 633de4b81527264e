//! Embedding and verification backend contracts.
//!
//! The deep models (scene-graph extraction, text/image embedders, the
//! vision-language verifier) sit behind two object-safe traits. [`mock`]
//! provides deterministic stand-ins driven by a ground-truth sidecar;
//! [`remote`] talks to model servers over HTTP.

pub mod mock;
pub mod remote;
mod truth;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::{FrameId, SegmentId};

pub use truth::{GroundTruth, GroundTruthError, SegmentTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingBackendDescriptor {
    pub name: String,
    pub dimension: usize,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("server returned status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Parse(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status(code) => *code == 429 || *code >= 500,
            BackendError::Parse(_) | BackendError::InvalidInput(_) => false,
        }
    }
}

/// Image embedding plus whether the backend had to fall back to a
/// synthetic vector for this locator.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vec<f32>,
    pub fallback: bool,
}

pub trait Embedder: Send + Sync {
    fn descriptor(&self, modality: Modality) -> EmbeddingBackendDescriptor;

    fn dimension(&self) -> usize {
        self.descriptor(Modality::Text).dimension
    }

    /// Unit-norm text embedding. Deterministic per backend instance.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError>;

    /// Unit-norm image embedding for an opaque image locator.
    fn embed_image(&self, locator: &str) -> Result<ImageEmbedding, BackendError>;

    fn embed_text_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        inputs.iter().map(|s| self.embed_text(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifierRequest {
    pub locator: String,
    /// "subject predicate object" rendering of the queried triple.
    pub triple_text: String,
    pub vid: SegmentId,
    pub fid: FrameId,
}

pub trait Verifier: Send + Sync {
    /// Confidence in [0, 1] that the frame shows the triple.
    fn verify(&self, request: &VerifierRequest) -> Result<f64, BackendError>;

    /// One confidence per request, in request order.
    fn verify_batch(&self, requests: &[VerifierRequest]) -> Result<Vec<f64>, BackendError> {
        requests.iter().map(|r| self.verify(r)).collect()
    }
}

/// Scales `v` to unit L2 norm. Returns `None` for the zero vector.
pub fn normalize(mut v: Vec<f32>) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for x in &mut v {
        *x = (f64::from(*x) / norm) as f32;
    }
    Some(v)
}

/// Embedder wrapper that records every input it forwards.
pub struct RecordingEmbedder<E> {
    inner: E,
    text_calls: Mutex<Vec<String>>,
    image_calls: Mutex<Vec<String>>,
}

impl<E: Embedder> RecordingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, text_calls: Mutex::new(Vec::new()), image_calls: Mutex::new(Vec::new()) }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn text_calls(&self) -> Vec<String> {
        self.text_calls.lock().unwrap().clone()
    }

    pub fn image_calls(&self) -> Vec<String> {
        self.image_calls.lock().unwrap().clone()
    }

    pub fn reset(&self) {
        self.text_calls.lock().unwrap().clear();
        self.image_calls.lock().unwrap().clear();
    }
}

impl<E: Embedder> Embedder for RecordingEmbedder<E> {
    fn descriptor(&self, modality: Modality) -> EmbeddingBackendDescriptor {
        self.inner.descriptor(modality)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.text_calls.lock().unwrap().push(text.to_owned());
        self.inner.embed_text(text)
    }

    fn embed_image(&self, locator: &str) -> Result<ImageEmbedding, BackendError> {
        self.image_calls.lock().unwrap().push(locator.to_owned());
        self.inner.embed_image(locator)
    }
}

/// Verifier wrapper counting calls.
pub struct CountingVerifier<V> {
    inner: V,
    calls: AtomicUsize,
}

impl<V: Verifier> CountingVerifier<V> {
    pub fn new(inner: V) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<V: Verifier> Verifier for CountingVerifier<V> {
    fn verify(&self, request: &VerifierRequest) -> Result<f64, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.verify(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn descriptor(&self, modality: Modality) -> EmbeddingBackendDescriptor {
        (**self).descriptor(modality)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        (**self).embed_text(text)
    }

    fn embed_image(&self, locator: &str) -> Result<ImageEmbedding, BackendError> {
        (**self).embed_image(locator)
    }

    fn embed_text_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        (**self).embed_text_batch(inputs)
    }
}

impl<T: Verifier + ?Sized> Verifier for std::sync::Arc<T> {
    fn verify(&self, request: &VerifierRequest) -> Result<f64, BackendError> {
        (**self).verify(request)
    }

    fn verify_batch(&self, requests: &[VerifierRequest]) -> Result<Vec<f64>, BackendError> {
        (**self).verify_batch(requests)
    }
}
