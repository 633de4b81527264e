//! Deterministic stand-ins for the model backends.
//!
//! Text embeddings are bag-of-words: every lower-cased alphanumeric token owns
//! a seeded Gaussian direction and a string embeds to the normalized sum of its
//! token directions. Equal strings embed identically, strings sharing tokens
//! are partially similar, token-disjoint strings are near-orthogonal.
//!
//! Image embeddings and verification consult a [`GroundTruth`] sidecar.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    normalize, BackendError, Embedder, EmbeddingBackendDescriptor, GroundTruth, ImageEmbedding,
    Modality, Verifier, VerifierRequest,
};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_SEED: u64 = 0x5eed_cafe;

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dimension: usize,
    truth: Arc<GroundTruth>,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_SEED, DEFAULT_DIMENSION)
    }
}

impl MockEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { seed, dimension, truth: Arc::new(GroundTruth::new()) }
    }

    pub fn with_truth(mut self, truth: Arc<GroundTruth>) -> Self {
        self.truth = truth;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn direction(&self, domain: &str, token: &str) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((domain.len() as u64).to_le_bytes());
        hasher.update(domain.as_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let v: Vec<f32> = (0..self.dimension)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        normalize(v).expect("gaussian sample is almost surely nonzero")
    }

    /// Largest pairwise cosine similarity among distinct entries of `vocab`.
    pub fn max_cross_similarity(&self, vocab: &[&str]) -> f64 {
        let vecs: Vec<Vec<f32>> = vocab.iter().map(|s| self.embed_text(s).unwrap()).collect();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..vecs.len() {
            for j in (i + 1)..vecs.len() {
                if vocab[i] != vocab[j] {
                    worst = worst.max(dot(&vecs[i], &vecs[j]));
                }
            }
        }
        worst
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn tokens(text: &str) -> Vec<String> {
    let toks: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if toks.is_empty() {
        vec![text.trim().to_owned()]
    } else {
        toks
    }
}

impl Embedder for MockEmbedder {
    fn descriptor(&self, modality: Modality) -> EmbeddingBackendDescriptor {
        EmbeddingBackendDescriptor {
            name: format!("mock-bow-{:x}", self.seed),
            dimension: self.dimension,
            modality,
        }
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidInput("empty text".into()));
        }
        let mut acc = vec![0f64; self.dimension];
        for tok in tokens(text) {
            for (a, x) in acc.iter_mut().zip(self.direction("text-token", &tok)) {
                *a += f64::from(x);
            }
        }
        normalize(acc.into_iter().map(|x| x as f32).collect())
            .ok_or_else(|| BackendError::InvalidInput(format!("degenerate text {text:?}")))
    }

    fn embed_image(&self, locator: &str) -> Result<ImageEmbedding, BackendError> {
        if locator.is_empty() {
            return Err(BackendError::InvalidInput("empty image locator".into()));
        }
        match self.truth.image_label(locator) {
            Some(label) => Ok(ImageEmbedding { vector: self.embed_text(label)?, fallback: false }),
            None => Ok(ImageEmbedding { vector: self.direction("image-fallback", locator), fallback: true }),
        }
    }
}

/// Returns 1.0 when the sidecar lists the triple text for the frame, else 0.0.
#[derive(Debug, Clone, Default)]
pub struct MockVerifier {
    truth: Arc<GroundTruth>,
}

impl MockVerifier {
    pub fn new(truth: Arc<GroundTruth>) -> Self {
        Self { truth }
    }
}

impl Verifier for MockVerifier {
    fn verify(&self, request: &VerifierRequest) -> Result<f64, BackendError> {
        if request.triple_text.is_empty() {
            return Err(BackendError::InvalidInput("empty triple text".into()));
        }
        Ok(if self.truth.holds(&request.vid, request.fid, &request.triple_text) { 1.0 } else { 0.0 })
    }
}
