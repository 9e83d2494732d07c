#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use guard_core::embedding::Embedders;
use guard_core::gateway::{BackendHandle, MockBackend, ScriptStep};
use guard_core::policy::seed_unsafebench_catalog;
use guard_core::retrieval::RetrievalConfig;
use guard_core::service::{router, AppState};
use guard_core::store::PrecedentDb;
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub const DIMS: usize = 32;

pub fn write_image(dir: &TempDir, name: &str, body: &[u8]) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

/// A service over an in-memory db, a keyed mock and hash embedders.
pub fn app(scripts: HashMap<String, Vec<ScriptStep>>, default: Vec<ScriptStep>, db: Arc<PrecedentDb>) -> Router {
    let backend = MockBackend::from_mock_script(guard_core::gateway::MockScript {
        steps: default,
        keyed: scripts,
    })
    .unwrap();
    let state = AppState::new(
        BackendHandle::new(backend),
        Embedders::hashed(DIMS),
        Arc::new(seed_unsafebench_catalog()),
        RetrievalConfig::default(),
        db,
    );
    router(state)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}
