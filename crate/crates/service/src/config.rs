//! Service configuration: a TOML file with `SCENEQUERY_*` environment
//! overrides applied on top.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use scenequery_core::backends::mock::{DEFAULT_DIMENSION, DEFAULT_SEED};
use scenequery_core::backends::remote::RemoteConfig;
use scenequery_core::engine::{EngineConfig, VerifierFailurePolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!("unknown backend {other:?}; expected mock or remote")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    pub dimension: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { seed: DEFAULT_SEED, dimension: DEFAULT_DIMENSION }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub mock: MockConfig,
    pub remote: RemoteConfig,
}

impl BackendConfig {
    pub fn dimension(&self) -> usize {
        match self.kind {
            BackendKind::Mock => self.mock.dimension,
            BackendKind::Remote => self.remote.dimension,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Socket address the HTTP server binds.
    pub listen: String,
    /// Re-segment ingested documents longer than this many frames.
    pub segment_length: Option<usize>,
    pub backend: BackendConfig,
    pub engine: EngineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("scenequery-data"),
            listen: "127.0.0.1:8080".into(),
            segment_length: None,
            backend: BackendConfig::default(),
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: String, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Invalid(format!("{key}: cannot parse {v:?}")))
}

impl ServiceConfig {
    /// Reads `path` when given, applies environment overrides and validates.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with(path, |k| std::env::var(k).ok())
    }

    pub fn load_with(path: Option<&Path>, get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                toml::from_str(&text).map_err(|source| ConfigError::Toml { path: p.display().to_string(), source })?
            }
            None => Self::default(),
        };
        config.apply_vars(get)?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("SCENEQUERY_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get("SCENEQUERY_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("SCENEQUERY_PORT") {
            let port: u16 = parse("SCENEQUERY_PORT", &v)?;
            let host = self.listen.rsplit_once(':').map_or(self.listen.as_str(), |(h, _)| h).to_owned();
            self.listen = format!("{host}:{port}");
        }
        if let Some(v) = get("SCENEQUERY_SEGMENT_LENGTH") {
            self.segment_length = Some(parse("SCENEQUERY_SEGMENT_LENGTH", &v)?);
        }
        if let Some(v) = get("SCENEQUERY_BACKEND") {
            self.backend.kind = v.parse().map_err(ConfigError::Invalid)?;
        }
        if let Some(v) = get("SCENEQUERY_MOCK_SEED") {
            self.backend.mock.seed = parse("SCENEQUERY_MOCK_SEED", &v)?;
        }
        if let Some(v) = get("SCENEQUERY_MOCK_DIMENSION") {
            self.backend.mock.dimension = parse("SCENEQUERY_MOCK_DIMENSION", &v)?;
        }
        if let Some(v) = get("SCENEQUERY_WORKERS") {
            self.engine.workers = parse("SCENEQUERY_WORKERS", &v)?;
        }
        if let Some(v) = get("SCENEQUERY_ON_VERIFIER_ERROR") {
            self.engine.on_verifier_error = match v.as_str() {
                "drop" => VerifierFailurePolicy::Drop,
                "abort" => VerifierFailurePolicy::Abort,
                _ => return Err(ConfigError::Invalid(format!("SCENEQUERY_ON_VERIFIER_ERROR: expected drop or abort, got {v:?}"))),
            };
        }
        self.backend.remote.apply_vars(&get).map_err(ConfigError::Invalid)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.listen.parse::<std::net::SocketAddr>().is_err() {
            return Err(ConfigError::Invalid(format!("listen: {:?} is not a socket address", self.listen)));
        }
        if self.segment_length == Some(0) {
            return Err(ConfigError::Invalid("segment_length must be positive".into()));
        }
        if self.backend.mock.dimension == 0 {
            return Err(ConfigError::Invalid("backend.mock.dimension must be positive".into()));
        }
        if self.engine.verify_batch == 0 {
            return Err(ConfigError::Invalid("engine.verify_batch must be positive".into()));
        }
        if self.backend.kind == BackendKind::Remote {
            self.backend.remote.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }
}
