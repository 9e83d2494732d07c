use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use guard_core::collector::{
    export_finetune_dataset, CollectionStatus, Collector, CollectorConfig, DiscardReason, ExportError, LabeledExample,
};
use guard_core::embedding::Embedders;
use guard_core::gateway::{BackendHandle, FnBackend, GatewayError, MockBackend, Role, ScriptStep};
use guard_core::policy::seed_unsafebench_catalog;
use guard_core::store::{PrecedentDb, Provenance, PvLabel};
use guard_core::synthetic::{collection_script, ScriptedOutcome, FIRST_CAPTION, REVISED_CAPTION, REVISED_RATIONALE};
use tempfile::TempDir;

fn image(dir: &TempDir, name: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, format!("pixels of {name}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn collector(scripts: HashMap<String, Vec<ScriptStep>>, critique: bool) -> Collector {
    let backend = BackendHandle::new(MockBackend::keyed(scripts).unwrap());
    Collector::new(backend, Arc::new(seed_unsafebench_catalog())).with_config(CollectorConfig {
        model_id: "mock".into(),
        critique_revise: critique,
    })
}

#[tokio::test]
async fn correct_first_pass_stores_first_caption() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let ex = LabeledExample::new(&loc, PvLabel::Violating, "violence");
    let c = collector(
        HashMap::from([(loc.clone(), collection_script(ScriptedOutcome::CorrectFirst, PvLabel::Violating))]),
        true,
    );
    let db = PrecedentDb::in_memory();
    let out = c.collect_one(&ex, &db).await.unwrap();
    assert_eq!(out.status, CollectionStatus::StoredFirstPass);
    assert_eq!(out.first_prediction, Some(PvLabel::Violating));
    assert_eq!(out.second_prediction, None);
    assert_eq!(out.transcript.turns.len(), 6);
    let p = db.get(out.precedent_id.unwrap()).unwrap();
    assert_eq!(p.caption, FIRST_CAPTION);
    assert_eq!(p.provenance, Provenance::FirstPass);
    assert_eq!(p.image.locator, loc);
    assert!(p.image.content_hash.is_some());
}

#[tokio::test]
async fn revised_path_stores_revised_trace() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let ex = LabeledExample::new(&loc, PvLabel::NonViolating, "hate");
    let c = collector(
        HashMap::from([(loc.clone(), collection_script(ScriptedOutcome::CorrectAfterRevise, PvLabel::NonViolating))]),
        true,
    );
    let db = PrecedentDb::in_memory();
    let out = c.collect_one(&ex, &db).await.unwrap();
    assert_eq!(out.status, CollectionStatus::StoredRevised);
    assert_eq!(out.first_prediction, Some(PvLabel::Violating));
    assert_eq!(out.second_prediction, Some(PvLabel::NonViolating));
    assert_eq!(out.transcript.turns.len(), 14);
    // roles alternate and only the first turn carries the image
    for (i, t) in out.transcript.turns.iter().enumerate() {
        assert_eq!(t.role, if i % 2 == 0 { Role::User } else { Role::Assistant });
        assert_eq!(t.image.is_some(), i == 0);
    }
    let p = db.get(out.precedent_id.unwrap()).unwrap();
    assert_eq!(p.caption, REVISED_CAPTION);
    assert_eq!(p.rationale, REVISED_RATIONALE);
    assert_eq!(p.provenance, Provenance::Revised);
}

#[tokio::test]
async fn wrong_twice_leaves_db_unchanged() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let ex = LabeledExample::new(&loc, PvLabel::Violating, "hate");
    let c = collector(
        HashMap::from([(loc.clone(), collection_script(ScriptedOutcome::WrongTwice, PvLabel::Violating))]),
        true,
    );
    let db = PrecedentDb::in_memory();
    let out = c.collect_one(&ex, &db).await.unwrap();
    assert_eq!(out.status, CollectionStatus::Discarded);
    assert_eq!(out.discard_reason, Some(DiscardReason::WrongTwice));
    assert!(!out.flagged());
    assert!(db.is_empty());
}

#[tokio::test]
async fn critique_disabled_stops_after_first_pass() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let ex = LabeledExample::new(&loc, PvLabel::Violating, "hate");
    let c = collector(
        HashMap::from([(loc.clone(), collection_script(ScriptedOutcome::CorrectAfterRevise, PvLabel::Violating))]),
        false,
    );
    let db = PrecedentDb::in_memory();
    let out = c.collect_one(&ex, &db).await.unwrap();
    assert_eq!(out.discard_reason, Some(DiscardReason::WrongFirstPass));
    assert_eq!(out.transcript.turns.len(), 6);
    assert!(db.is_empty());
}

#[tokio::test]
async fn unparseable_twice_is_flagged() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let steps = vec![
        ScriptStep::new("Generate", "caption"),
        ScriptStep::new("Does the image", "maybe"),
        ScriptStep::new("rationale", "{\"rationale\": \"unclear\"}"),
        ScriptStep::new("Critique", "critique"),
        ScriptStep::new("revise the caption", "revised"),
        ScriptStep::new("Based on the caption", "hard to say"),
        ScriptStep::new("rationale", "{\"rationale\": \"unclear\"}"),
    ];
    let c = collector(HashMap::from([(loc.clone(), steps)]), true);
    let db = PrecedentDb::in_memory();
    let out = c
        .collect_one(&LabeledExample::new(&loc, PvLabel::Violating, "hate"), &db)
        .await
        .unwrap();
    assert_eq!(out.discard_reason, Some(DiscardReason::UnparseableVerdict));
    assert!(out.flagged());
    assert_eq!(out.first_prediction, None);
}

#[tokio::test]
async fn backend_failure_discards_with_flag() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let backend = BackendHandle::new(FnBackend::new("down", |_| Err(GatewayError::BackendTimeout { attempts: 4 })));
    let c = Collector::new(backend, Arc::new(seed_unsafebench_catalog()));
    let db = PrecedentDb::in_memory();
    let out = c
        .collect_one(&LabeledExample::new(&loc, PvLabel::Violating, "hate"), &db)
        .await
        .unwrap();
    assert!(matches!(out.discard_reason, Some(DiscardReason::Backend(_))));
    assert!(out.flagged());
}

#[tokio::test]
async fn unreadable_image_and_unknown_policy() {
    let c = collector(HashMap::from([("x".to_string(), vec![ScriptStep::new("", "x")])]), true);
    let db = PrecedentDb::in_memory();
    let out = c
        .collect_one(&LabeledExample::new("/no/such/file.png", PvLabel::Violating, "hate"), &db)
        .await
        .unwrap();
    assert!(matches!(out.discard_reason, Some(DiscardReason::ImageUnreadable(_))));
    let err = c
        .collect_one(&LabeledExample::new("/no/such/file.png", PvLabel::Violating, "foo"), &db)
        .await
        .unwrap_err();
    assert!(err.to_string().contains("foo"));
}

#[tokio::test]
async fn rationale_failure_after_correct_judgment_is_flagged() {
    let dir = TempDir::new().unwrap();
    let loc = image(&dir, "a.png");
    let calls = std::sync::atomic::AtomicUsize::new(0);
    let backend = BackendHandle::new(FnBackend::new("flaky", move |_| {
        let n = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        match n {
            0 => Ok("caption".into()),
            1 => Ok("YES".into()),
            _ => Err(GatewayError::BackendUnavailable("gone".into())),
        }
    }));
    let c = Collector::new(backend, Arc::new(seed_unsafebench_catalog()));
    let db = PrecedentDb::in_memory();
    let out = c
        .collect_one(&LabeledExample::new(&loc, PvLabel::Violating, "hate"), &db)
        .await
        .unwrap();
    assert_eq!(out.status, CollectionStatus::Discarded);
    assert_eq!(out.first_prediction, Some(PvLabel::Violating));
    assert!(out.flagged());
    assert!(db.is_empty());
}

fn batch_fixture(dir: &TempDir, plan: &[(ScriptedOutcome, PvLabel)]) -> (Vec<LabeledExample>, HashMap<String, Vec<ScriptStep>>) {
    let mut examples = Vec::new();
    let mut scripts = HashMap::new();
    for (i, (outcome, label)) in plan.iter().enumerate() {
        let loc = image(dir, &format!("img{i}.png"));
        scripts.insert(loc.clone(), collection_script(*outcome, *label));
        examples.push(LabeledExample::new(loc, *label, if i % 2 == 0 { "hate" } else { "spam" }));
    }
    (examples, scripts)
}

#[tokio::test]
async fn batch_utilization_counts() {
    use ScriptedOutcome::*;
    let dir = TempDir::new().unwrap();
    let mut plan = vec![(CorrectFirst, PvLabel::Violating); 6];
    plan.extend([(CorrectAfterRevise, PvLabel::NonViolating); 3]);
    plan.push((WrongTwice, PvLabel::Violating));
    let (examples, scripts) = batch_fixture(&dir, &plan);
    let db = PrecedentDb::in_memory();
    let res = collector(scripts, true).collect_batch(&examples, &db, 3).await;
    assert_eq!(res.outcomes.len(), 10);
    assert_eq!(res.stats.attempted, 10);
    assert_eq!(res.stats.stored, 9);
    assert_eq!(res.stats.stored + res.stats.discarded, res.stats.attempted);
    assert_eq!(res.stats.pct, 0.9);
    assert_eq!(res.stats.pct_revised, 0.3);
    assert_eq!(db.len(), 9);
    // outcomes follow input order
    for (o, (outcome, _)) in res.outcomes.iter().zip(&plan) {
        let status = o.as_ref().unwrap().status;
        let expected = match outcome {
            CorrectFirst => CollectionStatus::StoredFirstPass,
            CorrectAfterRevise => CollectionStatus::StoredRevised,
            WrongTwice => CollectionStatus::Discarded,
        };
        assert_eq!(status, expected);
    }
}

#[tokio::test]
async fn all_correct_batch_of_16() {
    let dir = TempDir::new().unwrap();
    let plan = vec![(ScriptedOutcome::CorrectFirst, PvLabel::Violating); 16];
    let (examples, scripts) = batch_fixture(&dir, &plan);
    let db = PrecedentDb::in_memory();
    let res = collector(scripts, true).collect_batch(&examples, &db, 4).await;
    assert_eq!(res.stats.stored, 16);
    assert_eq!(res.stats.pct, 1.0);
}

#[tokio::test]
async fn parallelism_does_not_change_contents() {
    use ScriptedOutcome::*;
    let dir = TempDir::new().unwrap();
    let outcomes = [CorrectFirst, CorrectAfterRevise, WrongTwice];
    let plan: Vec<_> = (0..24)
        .map(|i| (outcomes[i % 3], PvLabel::from_violating(i % 4 < 2)))
        .collect();
    let (examples, scripts) = batch_fixture(&dir, &plan);
    let tuples = |db: &PrecedentDb| -> BTreeSet<(String, String, String, String, String)> {
        db.records()
            .into_iter()
            .map(|p| (p.image.locator, p.caption, p.label.to_string(), p.rationale, p.policy_id))
            .collect()
    };
    let db1 = PrecedentDb::in_memory();
    collector(scripts.clone(), true).collect_batch(&examples, &db1, 1).await;
    let db4 = PrecedentDb::in_memory();
    collector(scripts, true).collect_batch(&examples, &db4, 4).await;
    assert_eq!(tuples(&db1), tuples(&db4));
    assert_eq!(db1.len(), 16);
}

#[tokio::test]
async fn embeddings_are_attached_when_configured() {
    let dir = TempDir::new().unwrap();
    let (examples, scripts) = batch_fixture(&dir, &[(ScriptedOutcome::CorrectFirst, PvLabel::Violating)]);
    let db = PrecedentDb::in_memory();
    collector(scripts, true)
        .with_embedders(Embedders::hashed(16))
        .collect_batch(&examples, &db, 1)
        .await;
    let p = &db.records()[0];
    assert_eq!(p.image_embedding.as_ref().unwrap().dims(), 16);
    assert!(p.caption_embedding.is_some());
}

#[tokio::test]
async fn finetune_export() {
    use ScriptedOutcome::*;
    let dir = TempDir::new().unwrap();
    let (examples, scripts) = batch_fixture(
        &dir,
        &[
            (CorrectFirst, PvLabel::Violating),
            (CorrectAfterRevise, PvLabel::NonViolating),
            (CorrectFirst, PvLabel::NonViolating),
        ],
    );
    let db = PrecedentDb::in_memory();
    let catalog = seed_unsafebench_catalog();
    let out = dir.path().join("ft.jsonl");
    assert!(matches!(
        export_finetune_dataset(&db, &catalog, &out),
        Err(ExportError::EmptyDatabase)
    ));
    collector(scripts, true).collect_batch(&examples, &db, 1).await;
    assert_eq!(export_finetune_dataset(&db, &catalog, &out).unwrap(), 3);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert_eq!(l["messages"].as_array().unwrap().len(), 4);
    }
    let revised = &lines[1]["messages"];
    assert_eq!(revised[1]["text"], REVISED_CAPTION);
    assert_eq!(revised[3]["text"], "NO");
    assert_eq!(lines[0]["messages"][3]["text"], "YES");
    assert!(revised[0]["image"]["locator"].as_str().unwrap().ends_with("img1.png"));
    assert!(revised[2]["text"].as_str().unwrap().contains("Spam:"));
}
