use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedKind, Embedder, Embedders, HashEmbedder, HttpEmbedder};
use crate::gateway::{BackendHandle, GatewayError, HttpBackend, HttpBackendConfig, MockBackend, MockScript};
use crate::policy::{seed_unsafebench_catalog, PolicyCatalog, PolicyError};
use crate::retrieval::{RetrievalConfig, RetrievalMode, RetrievalSubject};
use crate::retry::RetryPolicy;

/// Prefix for environment overrides, e.g. `GUARD_DB_PATH`.
pub const ENV_PREFIX: &str = "GUARD_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Attempts per request, first try included.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Requests in flight at once.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_model() -> String {
    "default".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retries() -> u32 {
    4
}
fn default_parallelism() -> usize {
    4
}
fn default_dims() -> usize {
    512
}
fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn test_embedder() -> String {
    "test".into()
}

impl BackendConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        Self {
            base_url: None,
            mock_script: Some(script.into()),
            model_id: default_model(),
            api_key: None,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            parallelism: default_parallelism(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.base_url, &self.mock_script) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(ConfigError::Invalid(
                "backend needs exactly one of base_url and mock_script".into(),
            )),
        }
    }

    pub fn build(&self) -> Result<BackendHandle, ConfigError> {
        self.validate()?;
        if let Some(script) = &self.mock_script {
            let backend = MockBackend::from_mock_script(MockScript::load(script)?)?;
            return Ok(BackendHandle::with_limit(Arc::new(backend), self.parallelism));
        }
        let mut cfg = HttpBackendConfig::new(self.base_url.clone().unwrap_or_default(), self.model_id.clone());
        cfg.api_key = self.api_key.clone();
        cfg.timeout_ms = self.timeout_ms;
        cfg.retry = RetryPolicy {
            max_attempts: self.retries.max(1),
            ..RetryPolicy::default()
        };
        Ok(BackendHandle::with_limit(Arc::new(HttpBackend::new(cfg)?), self.parallelism))
    }
}

/// `"test"` selects the offline hash embedder; anything else is an
/// embedding service URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    #[serde(default = "test_embedder")]
    pub image: String,
    #[serde(default = "test_embedder")]
    pub text: String,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            image: test_embedder(),
            text: test_embedder(),
            dims: default_dims(),
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Embedders, ConfigError> {
        if self.dims == 0 {
            return Err(ConfigError::Invalid("embedder dims must be positive".into()));
        }
        let make = |spec: &str, kind: EmbedKind| -> Arc<dyn Embedder> {
            if spec == "test" {
                Arc::new(HashEmbedder::new(kind, self.dims, 0))
            } else {
                Arc::new(HttpEmbedder::new(spec, kind, self.dims, Duration::from_millis(self.timeout_ms)))
            }
        };
        Ok(Embedders::new(make(&self.image, EmbedKind::Image), make(&self.text, EmbedKind::Text)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub db_path: PathBuf,
    /// Seed catalog when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog_path: Option<PathBuf>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedders: EmbedderConfig,
    #[serde(default = "default_listen")]
    pub listen_addr: String,
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads the file, applies `GUARD_*` variables from the process
    /// environment, and validates.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Recognized keys (after the prefix): `DB_PATH`, `CATALOG_PATH`,
    /// `LISTEN_ADDR`, `BACKEND_BASE_URL`, `BACKEND_MOCK_SCRIPT`,
    /// `BACKEND_MODEL_ID`, `BACKEND_API_KEY`, `BACKEND_TIMEOUT_MS`,
    /// `BACKEND_RETRIES`, `BACKEND_PARALLELISM`, `EMBEDDER_IMAGE`,
    /// `EMBEDDER_TEXT`, `EMBEDDER_DIMS`, `RETRIEVAL_SUBJECT`,
    /// `RETRIEVAL_THRESHOLD` (a number, or `closest`). Setting one backend
    /// source clears the other.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError::Invalid(format!("{ENV_PREFIX}{key}: cannot parse {v:?}")))
        }
        for (k, v) in vars {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            match key {
                "DB_PATH" => self.db_path = v.into(),
                "CATALOG_PATH" => self.catalog_path = Some(v.into()),
                "LISTEN_ADDR" => self.listen_addr = v,
                "BACKEND_BASE_URL" => {
                    self.backend.base_url = Some(v);
                    self.backend.mock_script = None;
                }
                "BACKEND_MOCK_SCRIPT" => {
                    self.backend.mock_script = Some(v.into());
                    self.backend.base_url = None;
                }
                "BACKEND_MODEL_ID" => self.backend.model_id = v,
                "BACKEND_API_KEY" => self.backend.api_key = Some(v),
                "BACKEND_TIMEOUT_MS" => self.backend.timeout_ms = num(key, &v)?,
                "BACKEND_RETRIES" => self.backend.retries = num(key, &v)?,
                "BACKEND_PARALLELISM" => self.backend.parallelism = num(key, &v)?,
                "EMBEDDER_IMAGE" => self.embedders.image = v,
                "EMBEDDER_TEXT" => self.embedders.text = v,
                "EMBEDDER_DIMS" => self.embedders.dims = num(key, &v)?,
                "RETRIEVAL_SUBJECT" => {
                    self.retrieval.subject = match v.as_str() {
                        "image" => RetrievalSubject::Image,
                        "text" => RetrievalSubject::Text,
                        _ => return Err(ConfigError::Invalid(format!("{ENV_PREFIX}{key}: {v:?}"))),
                    }
                }
                "RETRIEVAL_THRESHOLD" => {
                    self.retrieval.mode = if v == "closest" {
                        RetrievalMode::Closest
                    } else {
                        RetrievalMode::Threshold { min_sim: num(key, &v)? }
                    }
                }
                _ => tracing::debug!(key = %k, "ignoring unknown override"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend.validate()?;
        self.retrieval
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn catalog(&self) -> Result<PolicyCatalog, ConfigError> {
        Ok(match &self.catalog_path {
            Some(p) => PolicyCatalog::load(p)?,
            None => seed_unsafebench_catalog(),
        })
    }
}
