//! HTTP clients for model servers.
//!
//! Wire format:
//!
//! * `POST {embed_url}` with `{"modality": "text"|"image", "inputs": [...]}`
//!   answered by `{"vectors": [[...], ...]}`.
//! * `POST {verify_url}` with `{"frames": [{"locator": .., "triple_text": ..}]}`
//!   answered by `{"confidences": [...]}`.
//!
//! Requests are batched client-side, capped at `max_in_flight` concurrent
//! HTTP calls per client, and retried with bounded exponential backoff on
//! retriable failures. Both endpoints are pure functions of their inputs, so
//! retries are idempotent.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{
    normalize, BackendError, Embedder, EmbeddingBackendDescriptor, ImageEmbedding, Modality,
    Verifier, VerifierRequest,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub embed_url: String,
    pub verify_url: String,
    pub model_name: String,
    pub dimension: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub batch_size: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            embed_url: "http://127.0.0.1:8100/embed".into(),
            verify_url: "http://127.0.0.1:8100/verify".into(),
            model_name: "remote".into(),
            dimension: 4096,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
            batch_size: 32,
        }
    }
}

impl RemoteConfig {
    /// Applies `SCENEQUERY_REMOTE_*` environment overrides.
    pub fn apply_env(&mut self) -> Result<(), String> {
        self.apply_vars(|k| std::env::var(k).ok())
    }

    pub fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_EMBED_URL") {
            self.embed_url = v;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_VERIFY_URL") {
            self.verify_url = v;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_MODEL") {
            self.model_name = v;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_DIMENSION") {
            self.dimension = num("SCENEQUERY_REMOTE_DIMENSION", v)?;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_TIMEOUT_MS") {
            self.timeout_ms = num("SCENEQUERY_REMOTE_TIMEOUT_MS", v)?;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_MAX_RETRIES") {
            self.max_retries = num("SCENEQUERY_REMOTE_MAX_RETRIES", v)?;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_MAX_IN_FLIGHT") {
            self.max_in_flight = num("SCENEQUERY_REMOTE_MAX_IN_FLIGHT", v)?;
        }
        if let Some(v) = get("SCENEQUERY_REMOTE_BATCH_SIZE") {
            self.batch_size = num("SCENEQUERY_REMOTE_BATCH_SIZE", v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dimension == 0 {
            return Err("remote.dimension must be positive".into());
        }
        if self.max_in_flight == 0 || self.batch_size == 0 {
            return Err("remote.max_in_flight and remote.batch_size must be positive".into());
        }
        Ok(())
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.freed.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Shared HTTP plumbing: bounded concurrency, timeouts, retries.
struct Transport {
    agent: ureq::Agent,
    config: RemoteConfig,
    gate: Semaphore,
}

impl Transport {
    fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Semaphore::new(config.max_in_flight.max(1));
        Self { agent, config, gate }
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R, BackendError> {
        let _permit = self.gate.acquire();
        let mut resp = self.agent.post(url).send_json(body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        resp.body_mut().read_json::<R>().map_err(|e| BackendError::Parse(e.to_string()))
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R, BackendError> {
        let mut attempt = 0;
        loop {
            match self.post_once(url, body) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retriable() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(10));
                    warn!(%url, attempt, error = %e, "retrying model request");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn map_ureq(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(code) => BackendError::Status(code),
        other => BackendError::Transport(other.to_string()),
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    modality: Modality,
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

pub struct RemoteEmbedder {
    transport: Transport,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }

    fn embed(&self, modality: Modality, inputs: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if let Some(bad) = inputs.iter().find(|s| s.trim().is_empty()) {
            return Err(BackendError::InvalidInput(format!("empty {modality:?} input {bad:?}")));
        }
        let cfg = &self.transport.config;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(cfg.batch_size.max(1)) {
            let resp: EmbedResponse =
                self.transport.post(&cfg.embed_url, &EmbedRequest { modality, inputs: chunk })?;
            if resp.vectors.len() != chunk.len() {
                return Err(BackendError::Parse(format!(
                    "expected {} vectors, got {}",
                    chunk.len(),
                    resp.vectors.len()
                )));
            }
            for v in resp.vectors {
                if v.len() != cfg.dimension {
                    return Err(BackendError::Parse(format!(
                        "expected dimension {}, got {}",
                        cfg.dimension,
                        v.len()
                    )));
                }
                out.push(normalize(v).ok_or_else(|| BackendError::Parse("zero vector".into()))?);
            }
        }
        Ok(out)
    }
}

impl Embedder for RemoteEmbedder {
    fn descriptor(&self, modality: Modality) -> EmbeddingBackendDescriptor {
        let cfg = &self.transport.config;
        EmbeddingBackendDescriptor { name: cfg.model_name.clone(), dimension: cfg.dimension, modality }
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.embed(Modality::Text, &[text.to_owned()])?.remove(0))
    }

    fn embed_image(&self, locator: &str) -> Result<ImageEmbedding, BackendError> {
        let vector = self.embed(Modality::Image, &[locator.to_owned()])?.remove(0);
        Ok(ImageEmbedding { vector, fallback: false })
    }

    fn embed_text_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.embed(Modality::Text, inputs)
    }
}

#[derive(Serialize)]
struct VerifyFrame<'a> {
    locator: &'a str,
    triple_text: &'a str,
}

#[derive(Serialize)]
struct VerifyRequestBody<'a> {
    frames: Vec<VerifyFrame<'a>>,
}

#[derive(Deserialize)]
struct VerifyResponse {
    confidences: Vec<serde_json::Value>,
}

/// Reads a confidence from a verifier answer: a number in [0, 1], a numeric
/// string, or a yes/no word.
pub fn parse_confidence(value: &serde_json::Value) -> Result<f64, BackendError> {
    let c = match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
        serde_json::Value::String(s) => {
            let s = s.trim().to_ascii_lowercase();
            match s.as_str() {
                "yes" | "true" => Some(1.0),
                "no" | "false" => Some(0.0),
                _ => s.parse::<f64>().ok(),
            }
        }
        _ => None,
    };
    match c {
        Some(c) if (0.0..=1.0).contains(&c) => Ok(c),
        _ => Err(BackendError::Parse(format!("unreadable confidence {value}"))),
    }
}

pub struct RemoteVerifier {
    transport: Transport,
}

impl RemoteVerifier {
    pub fn new(config: RemoteConfig) -> Self {
        Self { transport: Transport::new(config) }
    }
}

impl Verifier for RemoteVerifier {
    fn verify(&self, request: &VerifierRequest) -> Result<f64, BackendError> {
        Ok(self.verify_batch(std::slice::from_ref(request))?.remove(0))
    }

    fn verify_batch(&self, requests: &[VerifierRequest]) -> Result<Vec<f64>, BackendError> {
        let cfg = &self.transport.config;
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(cfg.batch_size.max(1)) {
            let body = VerifyRequestBody {
                frames: chunk
                    .iter()
                    .map(|r| VerifyFrame { locator: &r.locator, triple_text: &r.triple_text })
                    .collect(),
            };
            let resp: VerifyResponse = self.transport.post(&cfg.verify_url, &body)?;
            if resp.confidences.len() != chunk.len() {
                return Err(BackendError::Parse(format!(
                    "expected {} confidences, got {}",
                    chunk.len(),
                    resp.confidences.len()
                )));
            }
            for c in &resp.confidences {
                out.push(parse_confidence(c)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn confidence_forms() {
        assert_eq!(parse_confidence(&json!(0.75)).unwrap(), 0.75);
        assert_eq!(parse_confidence(&json!("Yes")).unwrap(), 1.0);
        assert_eq!(parse_confidence(&json!("no")).unwrap(), 0.0);
        assert_eq!(parse_confidence(&json!(" 0.3 ")).unwrap(), 0.3);
        assert_eq!(parse_confidence(&json!(true)).unwrap(), 1.0);
        assert!(parse_confidence(&json!(1.5)).is_err());
        assert!(parse_confidence(&json!("maybe")).is_err());
        assert!(parse_confidence(&json!(null)).is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RemoteConfig::default();
        let vars = [
            ("SCENEQUERY_REMOTE_EMBED_URL", "http://h:1/embed"),
            ("SCENEQUERY_REMOTE_MAX_IN_FLIGHT", "9"),
            ("SCENEQUERY_REMOTE_TIMEOUT_MS", "15"),
        ];
        cfg.apply_vars(|k| vars.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())).unwrap();
        assert_eq!(cfg.embed_url, "http://h:1/embed");
        assert_eq!(cfg.max_in_flight, 9);
        assert_eq!(cfg.timeout_ms, 15);
        assert!(cfg.apply_vars(|k| (k == "SCENEQUERY_REMOTE_BATCH_SIZE").then(|| "x".into())).is_err());
    }

    #[test]
    fn unreachable_server_is_transport_error() {
        let cfg = RemoteConfig {
            embed_url: "http://127.0.0.1:9/embed".into(),
            max_retries: 1,
            backoff_ms: 1,
            timeout_ms: 500,
            ..Default::default()
        };
        let err = RemoteEmbedder::new(cfg).embed_text("dog").unwrap_err();
        assert!(err.is_retriable(), "{err:?}");
    }
}
