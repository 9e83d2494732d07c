//! Multi-turn chat interface to vision-language model backends.
//!
//! Callers own the [`Conversation`] and extend it themselves; a backend only
//! produces the next assistant message. Every call goes through a
//! [`BackendHandle`], which validates role alternation before any network
//! traffic and bounds the number of in-flight requests.

mod http;
mod mock;

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::image::{ImageRef, LoadedImage};

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{FnBackend, MockBackend, MockScript, ScriptStep};

pub const DEFAULT_IN_FLIGHT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },
    #[error("backend kept rate limiting after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("mock script exhausted")]
    ScriptExhausted,
    #[error("no mock step matches the last user turn: {0:?}")]
    NoMatchingStep(String),
    #[error("mock script must contain at least one step")]
    EmptyScript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image: Option<ImageRef>,
}

/// An ordered chat transcript. Image bytes ride along for backends that
/// need them but are never serialized.
#[derive(Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub model_id: String,
    pub turns: Vec<ChatTurn>,
    #[serde(skip)]
    image_bytes: Option<Arc<[u8]>>,
}

impl fmt::Debug for Conversation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Conversation")
            .field("model_id", &self.model_id)
            .field("turns", &self.turns)
            .field("image_bytes", &self.image_bytes.as_ref().map(|b| b.len()))
            .finish()
    }
}

impl Conversation {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn push_user(&mut self, text: impl Into<String>) -> &mut Self {
        self.turns.push(ChatTurn {
            role: Role::User,
            text: text.into(),
            image: None,
        });
        self
    }

    pub fn push_user_with_image(&mut self, text: impl Into<String>, image: &LoadedImage) -> &mut Self {
        self.turns.push(ChatTurn {
            role: Role::User,
            text: text.into(),
            image: Some(image.image.clone()),
        });
        self.image_bytes = Some(image.bytes.clone());
        self
    }

    pub fn push_assistant(&mut self, text: impl Into<String>) -> &mut Self {
        self.turns.push(ChatTurn {
            role: Role::Assistant,
            text: text.into(),
            image: None,
        });
        self
    }

    pub fn image(&self) -> Option<&ImageRef> {
        self.turns.iter().find_map(|t| t.image.as_ref())
    }

    pub fn image_bytes(&self) -> Option<&Arc<[u8]>> {
        self.image_bytes.as_ref()
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
    }

    pub fn assistant_replies(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .map(|t| t.text.as_str())
    }

    /// Checks alternation (starting with the user), non-empty text, and
    /// that the only image sits on the first user turn.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidConversation(m));
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return bad(format!("turn {i} should be {expected:?}"));
            }
            if turn.text.trim().is_empty() {
                return bad(format!("turn {i} has empty text"));
            }
            if turn.image.is_some() && i != 0 {
                return bad(format!("turn {i} carries an image; only the first user turn may"));
            }
        }
        Ok(())
    }

    /// Valid and awaiting an assistant reply.
    pub fn validate_for_completion(&self) -> Result<(), GatewayError> {
        self.validate()?;
        match self.turns.last() {
            Some(t) if t.role == Role::User => Ok(()),
            Some(_) => Err(GatewayError::InvalidConversation(
                "last turn must be from the user".into(),
            )),
            None => Err(GatewayError::InvalidConversation("conversation is empty".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Requests issued, retries included.
    pub attempts: u32,
}

#[async_trait]
pub trait VlmBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn complete(&self, conv: &Conversation) -> Result<BackendResponse, GatewayError>;
}

/// Shared handle to a backend with an in-flight request limiter.
#[derive(Clone)]
pub struct BackendHandle {
    inner: Arc<dyn VlmBackend>,
    limiter: Arc<Semaphore>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("backend", &self.inner.id())
            .field("available_permits", &self.limiter.available_permits())
            .finish()
    }
}

impl BackendHandle {
    pub fn new(backend: impl VlmBackend + 'static) -> Self {
        Self::with_limit(Arc::new(backend), DEFAULT_IN_FLIGHT)
    }

    pub fn with_limit(backend: Arc<dyn VlmBackend>, in_flight: usize) -> Self {
        Self {
            inner: backend,
            limiter: Arc::new(Semaphore::new(in_flight.max(1))),
        }
    }

    pub fn id(&self) -> &str {
        self.inner.id()
    }

    /// Returns the backend's next assistant message; `conv` is not modified.
    pub async fn complete(&self, conv: &Conversation) -> Result<BackendResponse, GatewayError> {
        conv.validate_for_completion()?;
        let _permit = self.limiter.acquire().await.expect("limiter never closed");
        let resp = self.inner.complete(conv).await?;
        if resp.text.trim().is_empty() {
            return Err(GatewayError::MalformedBackendReply("empty reply".into()));
        }
        Ok(resp)
    }

    /// Sends `conv` and appends the reply as an assistant turn.
    pub async fn exchange(&self, conv: &mut Conversation) -> Result<String, GatewayError> {
        let resp = self.complete(conv).await?;
        conv.push_assistant(resp.text.clone());
        Ok(resp.text)
    }
}
