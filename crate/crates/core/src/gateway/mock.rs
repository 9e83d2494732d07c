use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendResponse, Conversation, GatewayError, VlmBackend};

/// One scripted reply, used when `match` occurs in the last user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(rename = "match")]
    pub pattern: String,
    pub reply: String,
}

impl ScriptStep {
    pub fn new(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            reply: reply.into(),
        }
    }
}

/// On-disk mock script: either a bare array of steps or an object with a
/// default `steps` list and per-image `keyed` lists (keyed by image locator).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub steps: Vec<ScriptStep>,
    #[serde(default)]
    pub keyed: HashMap<String, Vec<ScriptStep>>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        if text.trim_start().starts_with('[') {
            Ok(Self {
                steps: serde_json::from_str(text)?,
                keyed: HashMap::new(),
            })
        } else {
            serde_json::from_str(text)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GatewayError::BackendUnavailable(format!("mock script: {e}")))?;
        Self::from_json(&text).map_err(|e| GatewayError::BackendUnavailable(format!("mock script: {e}")))
    }
}

/// Deterministic scripted backend. Each call consumes the first remaining
/// step whose pattern appears in the last user turn. Keyed scripts are
/// selected by the conversation's image locator so concurrent pipelines
/// never interfere.
#[derive(Clone)]
pub struct MockBackend {
    id: String,
    default: Arc<Mutex<Vec<ScriptStep>>>,
    keyed: Arc<HashMap<String, Mutex<Vec<ScriptStep>>>>,
    calls: Arc<AtomicUsize>,
}

impl MockBackend {
    pub fn from_script(steps: Vec<ScriptStep>) -> Result<Self, GatewayError> {
        if steps.is_empty() {
            return Err(GatewayError::EmptyScript);
        }
        Ok(Self::build(MockScript {
            steps,
            keyed: HashMap::new(),
        }))
    }

    pub fn from_mock_script(script: MockScript) -> Result<Self, GatewayError> {
        if script.steps.is_empty() && script.keyed.values().all(Vec::is_empty) {
            return Err(GatewayError::EmptyScript);
        }
        Ok(Self::build(script))
    }

    pub fn keyed(scripts: HashMap<String, Vec<ScriptStep>>) -> Result<Self, GatewayError> {
        Self::from_mock_script(MockScript {
            steps: Vec::new(),
            keyed: scripts,
        })
    }

    fn build(script: MockScript) -> Self {
        Self {
            id: "mock".into(),
            default: Arc::new(Mutex::new(script.steps)),
            keyed: Arc::new(
                script
                    .keyed
                    .into_iter()
                    .map(|(k, v)| (k, Mutex::new(v)))
                    .collect(),
            ),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn next_reply(&self, conv: &Conversation) -> Result<String, GatewayError> {
        let last = conv.last_user_text().unwrap_or_default();
        let script = conv
            .image()
            .and_then(|img| self.keyed.get(&img.locator))
            .unwrap_or(&self.default);
        let mut steps = script.lock().expect("mock lock poisoned");
        if steps.is_empty() {
            return Err(GatewayError::ScriptExhausted);
        }
        let idx = steps
            .iter()
            .position(|s| last.contains(&s.pattern))
            .ok_or_else(|| GatewayError::NoMatchingStep(last.chars().take(80).collect()))?;
        Ok(steps.remove(idx).reply)
    }
}

#[async_trait]
impl VlmBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, conv: &Conversation) -> Result<BackendResponse, GatewayError> {
        let start = Instant::now();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self.next_reply(conv)?;
        Ok(BackendResponse {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            attempts: 1,
        })
    }
}

type ReplyFn = dyn Fn(&Conversation) -> Result<String, GatewayError> + Send + Sync;

/// Backend driven by a closure over the conversation. Handy for simulated
/// models whose replies depend on prompt content.
#[derive(Clone)]
pub struct FnBackend {
    id: String,
    reply: Arc<ReplyFn>,
}

impl FnBackend {
    pub fn new(
        id: impl Into<String>,
        reply: impl Fn(&Conversation) -> Result<String, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            reply: Arc::new(reply),
        }
    }
}

#[async_trait]
impl VlmBackend for FnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, conv: &Conversation) -> Result<BackendResponse, GatewayError> {
        let start = Instant::now();
        let text = (self.reply)(conv)?;
        Ok(BackendResponse {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendHandle;
    use crate::prompt::{render, Bindings, Template};

    fn user(text: &str) -> Conversation {
        let mut c = Conversation::new("m");
        c.push_user(text);
        c
    }

    #[tokio::test]
    async fn scripted_reply() {
        let h = BackendHandle::new(MockBackend::from_script(vec![ScriptStep::new("", "a cat photo")]).unwrap());
        assert_eq!(h.complete(&user("anything")).await.unwrap().text, "a cat photo");
    }

    #[tokio::test]
    async fn caption_prompt_matches_description_step() {
        let h = BackendHandle::new(
            MockBackend::from_script(vec![ScriptStep::new("description", "two men fighting")]).unwrap(),
        );
        let prompt = render(Template::CaptionRequest, &Bindings::new()).unwrap();
        assert_eq!(h.complete(&user(&prompt)).await.unwrap().text, "two men fighting");
        assert_eq!(h.complete(&user(&prompt)).await, Err(GatewayError::ScriptExhausted));
    }

    #[tokio::test]
    async fn no_matching_step() {
        let h = BackendHandle::new(MockBackend::from_script(vec![ScriptStep::new("zzz", "x")]).unwrap());
        assert!(matches!(h.complete(&user("hello")).await, Err(GatewayError::NoMatchingStep(_))));
    }

    #[test]
    fn empty_script_rejected() {
        assert!(matches!(MockBackend::from_script(vec![]), Err(GatewayError::EmptyScript)));
    }

    #[tokio::test]
    async fn second_iteration_turn_order() {
        // Steps listed out of order; matching picks them by prompt content.
        let h = BackendHandle::new(
            MockBackend::from_script(vec![
                ScriptStep::new("revise", "revised caption"),
                ScriptStep::new("Critique", "the caption missed a knife"),
            ])
            .unwrap(),
        );
        let mut c = Conversation::new("m");
        c.push_user(render(Template::CritiqueRequest, &Bindings::new().with("caption", "c").with("policy", "Violence")).unwrap());
        assert_eq!(h.exchange(&mut c).await.unwrap(), "the caption missed a knife");
        c.push_user(render(Template::ReviseRequest, &Bindings::new()).unwrap());
        assert_eq!(h.exchange(&mut c).await.unwrap(), "revised caption");
    }

    #[tokio::test]
    async fn identical_scripts_give_identical_transcripts() {
        async fn run() -> Conversation {
            let h = BackendHandle::new(
                MockBackend::from_script(vec![ScriptStep::new("a", "1"), ScriptStep::new("b", "2")]).unwrap(),
            );
            let mut c = Conversation::new("m");
            c.push_user("a");
            h.exchange(&mut c).await.unwrap();
            c.push_user("b");
            h.exchange(&mut c).await.unwrap();
            c
        }
        assert_eq!(run().await, run().await);
    }

    #[test]
    fn script_file_formats() {
        let bare = MockScript::from_json(r#"[{"match": "x", "reply": "y"}]"#).unwrap();
        assert_eq!(bare.steps, vec![ScriptStep::new("x", "y")]);
        let keyed = MockScript::from_json(r#"{"keyed": {"a.png": [{"match": "", "reply": "z"}]}}"#).unwrap();
        assert_eq!(keyed.keyed["a.png"][0].reply, "z");
    }
}
