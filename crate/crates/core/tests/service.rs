mod support;

use std::collections::HashMap;
use std::sync::Arc;

use axum::http::StatusCode;
use base64::Engine;
use guard_core::collector::{Collector, LabeledExample};
use guard_core::embedding::Embedders;
use guard_core::gateway::{BackendHandle, MockBackend, ScriptStep};
use guard_core::image::LoadedImage;
use guard_core::judge::Judge;
use guard_core::policy::seed_unsafebench_catalog;
use guard_core::retrieval::RetrievalConfig;
use guard_core::service::{AppState, ServiceConfig};
use guard_core::store::{PrecedentDb, PvLabel};
use guard_core::synthetic::{collection_script, ScriptedOutcome};
use serde_json::json;
use support::{app, call, write_image, DIMS};
use tempfile::TempDir;

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn judge_steps(answer: &str) -> Vec<ScriptStep> {
    vec![
        ScriptStep::new("Generate a detailed description", "a caption"),
        ScriptStep::new("Based on", answer),
    ]
}

#[tokio::test]
async fn healthz_reports_count() {
    let app = app(HashMap::new(), judge_steps("NO"), Arc::new(PrecedentDb::in_memory()));
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok", "precedents": 0}));
}

#[tokio::test]
async fn judge_rejects_bad_bodies() {
    let app = app(HashMap::new(), judge_steps("NO"), Arc::new(PrecedentDb::in_memory()));
    let both = json!({"image_b64": b64(b"x"), "image_url": "http://example.invalid/a.png"});
    assert_eq!(call(&app, "POST", "/v1/judge", Some(both)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/v1/judge", Some(json!({}))).await.0, StatusCode::BAD_REQUEST);
    let (status, body) = call(&app, "POST", "/v1/judge", Some(json!({"image_b64": "!!!"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "BadImage");
    let (status, _) = call(&app, "POST", "/v1/judge", Some(json!({"image_url": "/does/not/exist.png"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn judge_maps_failures_to_statuses() {
    let db = Arc::new(PrecedentDb::in_memory());
    let app_unparseable = app(HashMap::new(), judge_steps("I cannot tell"), db.clone());
    let (status, body) = call(&app_unparseable, "POST", "/v1/judge", Some(json!({"image_b64": b64(b"x")}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "UnparseableVerdict");

    // a script with no judgment step exhausts after the caption
    let app_exhausted = app(
        HashMap::new(),
        vec![ScriptStep::new("Generate a detailed description", "a caption")],
        db,
    );
    let (status, body) = call(&app_exhausted, "POST", "/v1/judge", Some(json!({"image_b64": b64(b"x")}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"], "BackendUnavailable");
}

#[tokio::test]
async fn endpoint_matches_library_call() {
    let dir = TempDir::new().unwrap();
    let mut scripts = HashMap::new();
    let mut examples = Vec::new();
    for i in 0..4 {
        let loc = write_image(&dir, &format!("p{i}.png"), format!("precedent {i}").as_bytes());
        let label = PvLabel::from_violating(i % 2 == 0);
        scripts.insert(loc.clone(), collection_script(ScriptedOutcome::CorrectFirst, label));
        examples.push(LabeledExample::new(loc, label, "hate"));
    }
    let db = Arc::new(PrecedentDb::in_memory());
    let catalog = Arc::new(seed_unsafebench_catalog());
    let collector = Collector::new(BackendHandle::new(MockBackend::keyed(scripts).unwrap()), catalog.clone())
        .with_embedders(Embedders::hashed(DIMS));
    collector.collect_batch(&examples, &db, 2).await;
    assert_eq!(db.len(), 4);

    // query with the exact bytes of precedent 0's image
    let bytes = std::fs::read(&db.records()[0].image.locator).unwrap();
    let app = app(HashMap::new(), judge_steps("YES"), db.clone());
    let (status, body) = call(&app, "POST", "/v1/judge", Some(json!({"image_b64": b64(&bytes)}))).await;
    assert_eq!(status, StatusCode::OK);

    let judge = Judge::new(
        BackendHandle::new(MockBackend::from_script(judge_steps("YES")).unwrap()),
        Embedders::hashed(DIMS),
        catalog,
        RetrievalConfig::default(),
    );
    let direct = judge.judge_image(&LoadedImage::from_upload(bytes), &db).await.unwrap();
    assert_eq!(body, serde_json::to_value(&direct).unwrap());
    assert_eq!(body["mode"], "PrecedentRag");
    assert_eq!(body["precedent_id"], 1);
}

#[tokio::test]
async fn collect_paths() {
    let dir = TempDir::new().unwrap();
    let good = write_image(&dir, "good.png", b"good");
    let bad = write_image(&dir, "bad.png", b"bad");
    let scripts = HashMap::from([
        (good.clone(), collection_script(ScriptedOutcome::CorrectFirst, PvLabel::Violating)),
        (bad.clone(), collection_script(ScriptedOutcome::WrongTwice, PvLabel::Violating)),
    ]);
    let db = Arc::new(PrecedentDb::in_memory());
    let app = app(scripts, vec![], db.clone());

    let (status, body) = call(
        &app,
        "POST",
        "/v1/precedents/collect",
        Some(json!({"image": good, "label": "PV", "policy_id": "violence"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "StoredFirstPass");
    assert_eq!(body["precedent_id"], 1);

    let (status, body) = call(
        &app,
        "POST",
        "/v1/precedents/collect",
        Some(json!({"image": good, "label": "PV", "policy_id": "foo"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UnknownPolicy");

    let (_, before) = call(&app, "GET", "/v1/precedents", None).await;
    let (status, body) = call(
        &app,
        "POST",
        "/v1/precedents/collect",
        Some(json!({"image": bad, "label": "PV", "policy_id": "violence"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "Discarded");
    let (_, after) = call(&app, "GET", "/v1/precedents", None).await;
    assert_eq!(before["items"].as_array().unwrap().len(), after["items"].as_array().unwrap().len());
    assert_eq!(db.len(), 1);
}

#[tokio::test]
async fn listing_filters_and_pages() {
    let dir = TempDir::new().unwrap();
    let mut scripts = HashMap::new();
    let mut bodies = Vec::new();
    for i in 0..5 {
        let loc = write_image(&dir, &format!("i{i}.png"), format!("img {i}").as_bytes());
        scripts.insert(loc.clone(), collection_script(ScriptedOutcome::CorrectFirst, PvLabel::Violating));
        bodies.push(json!({"image": loc, "label": "PV", "policy_id": if i < 3 { "hate" } else { "spam" }}));
    }
    let db = Arc::new(PrecedentDb::in_memory());
    let app = app(scripts, vec![], db);
    for b in bodies {
        assert_eq!(call(&app, "POST", "/v1/precedents/collect", Some(b)).await.0, StatusCode::OK);
    }

    let (_, all) = call(&app, "GET", "/v1/precedents?policy=hate", None).await;
    assert_eq!(all["items"].as_array().unwrap().len(), 3);
    assert_eq!(all["next_cursor"], serde_json::Value::Null);

    let (_, revised) = call(&app, "GET", "/v1/precedents?provenance=Revised", None).await;
    assert!(revised["items"].as_array().unwrap().is_empty());
    assert_eq!(revised["next_cursor"], serde_json::Value::Null);

    let mut sizes = Vec::new();
    let mut ids = Vec::new();
    let mut uri = "/v1/precedents?limit=2".to_string();
    loop {
        let (status, page) = call(&app, "GET", &uri, None).await;
        assert_eq!(status, StatusCode::OK);
        let items = page["items"].as_array().unwrap();
        sizes.push(items.len());
        ids.extend(items.iter().map(|p| p["id"].as_u64().unwrap()));
        match page["next_cursor"].as_u64() {
            Some(c) => uri = format!("/v1/precedents?limit=2&cursor={c}"),
            None => break,
        }
    }
    assert_eq!(sizes, vec![2, 2, 1]);
    assert_eq!(ids, vec![1, 2, 3, 4, 5]);

    for bad in ["limit=1001", "limit=0", "limit=abc", "provenance=Maybe", "label=perhaps", "policy=nope", "cursor=x"] {
        let (status, body) = call(&app, "GET", &format!("/v1/precedents?{bad}"), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(body["error"], "BadFilter");
    }
}

#[test]
fn state_from_config_file_holds_the_writer_lock() {
    let dir = TempDir::new().unwrap();
    let script = dir.path().join("mock.json");
    std::fs::write(&script, r#"[{"match": "", "reply": "NO"}]"#).unwrap();
    let db_path = dir.path().join("db.jsonl");
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        json!({"db_path": db_path, "backend": {"mock_script": script}, "embedders": {"dims": 16}}).to_string(),
    )
    .unwrap();
    let cfg = ServiceConfig::load(&cfg_path).unwrap();
    let state = AppState::from_config(&cfg).unwrap();
    assert!(state.db.is_empty());
    assert!(PrecedentDb::open(&db_path).is_err());
}
