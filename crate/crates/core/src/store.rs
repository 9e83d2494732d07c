//! Append-only precedent database persisted as JSON Lines.
//!
//! Every committed record is written and fsynced before `append` returns.
//! Records are immutable after commit and ids are never reused, including
//! across restarts (the next id is derived from the file on open).

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::image::ImageRef;
use crate::policy::PolicyCatalog;

pub type PrecedentId = u64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("invalid precedent: field `{0}` failed validation")]
    InvalidPrecedent(&'static str),
    #[error("corrupt record on line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("database `{0}` is locked by another writer")]
    Locked(PathBuf),
    #[error("attempted count {attempted} is less than stored count {stored}")]
    AttemptedLessThanStored { attempted: usize, stored: usize },
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StorageFailure(e.to_string())
    }
}

/// Ground-truth or predicted policy-violation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PvLabel {
    #[serde(rename = "PV")]
    Violating,
    #[serde(rename = "NON_PV")]
    NonViolating,
}

impl PvLabel {
    pub fn from_violating(violating: bool) -> Self {
        if violating {
            PvLabel::Violating
        } else {
            PvLabel::NonViolating
        }
    }

    pub fn is_violating(self) -> bool {
        self == PvLabel::Violating
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PvLabel::Violating => "PV",
            PvLabel::NonViolating => "NON_PV",
        }
    }

    /// The one-word answer the judgment prompts ask for.
    pub fn as_answer(self) -> &'static str {
        match self {
            PvLabel::Violating => "YES",
            PvLabel::NonViolating => "NO",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PV" | "VIOLATING" | "YES" | "UNSAFE" | "1" | "TRUE" => Some(PvLabel::Violating),
            "NON_PV" | "NON-PV" | "NONVIOLATING" | "NO" | "SAFE" | "0" | "FALSE" => {
                Some(PvLabel::NonViolating)
            }
            _ => None,
        }
    }
}

impl fmt::Display for PvLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a precedent came straight from the first pass or was salvaged by
/// the critique-revise round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    FirstPass,
    Revised,
}

impl Provenance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "FirstPass" | "first-pass" | "first_pass" => Some(Provenance::FirstPass),
            "Revised" | "revised" => Some(Provenance::Revised),
            _ => None,
        }
    }
}

/// A committed precedent. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precedent {
    pub id: PrecedentId,
    pub image: ImageRef,
    pub caption: String,
    pub label: PvLabel,
    pub rationale: String,
    pub policy_id: String,
    pub provenance: Provenance,
    pub image_embedding: Option<EmbeddingVector>,
    pub caption_embedding: Option<EmbeddingVector>,
    pub created_at: DateTime<Utc>,
}

impl Precedent {
    pub fn is_retrievable(&self) -> bool {
        self.image_embedding.is_some() || self.caption_embedding.is_some()
    }
}

/// A precedent before the store assigns its id and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecedentDraft {
    pub image: ImageRef,
    pub caption: String,
    pub label: PvLabel,
    pub rationale: String,
    pub policy_id: String,
    pub provenance: Provenance,
    pub image_embedding: Option<EmbeddingVector>,
    pub caption_embedding: Option<EmbeddingVector>,
}

impl PrecedentDraft {
    fn validate(&self, catalog: &PolicyCatalog) -> Result<(), StoreError> {
        if self.caption.trim().is_empty() {
            return Err(StoreError::InvalidPrecedent("caption"));
        }
        if self.rationale.trim().is_empty() {
            return Err(StoreError::InvalidPrecedent("rationale"));
        }
        if !catalog.contains(&self.policy_id) {
            return Err(StoreError::InvalidPrecedent("policy_id"));
        }
        Ok(())
    }
}

impl From<Precedent> for PrecedentDraft {
    fn from(p: Precedent) -> Self {
        Self {
            image: p.image,
            caption: p.caption,
            label: p.label,
            rationale: p.rationale,
            policy_id: p.policy_id,
            provenance: p.provenance,
            image_embedding: p.image_embedding,
            caption_embedding: p.caption_embedding,
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Conjunctive record filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrecedentFilter {
    pub policy_id: Option<String>,
    pub provenance: Option<Provenance>,
    pub label: Option<PvLabel>,
}

impl PrecedentFilter {
    pub fn policy(id: impl Into<String>) -> Self {
        Self {
            policy_id: Some(id.into()),
            ..Self::default()
        }
    }

    pub fn matches(&self, p: &Precedent) -> bool {
        self.policy_id.as_deref().is_none_or(|id| p.policy_id == id)
            && self.provenance.is_none_or(|v| p.provenance == v)
            && self.label.is_none_or(|l| p.label == l)
    }
}

struct State {
    records: Vec<Arc<Precedent>>,
    next_id: PrecedentId,
    writer: Option<File>,
}

/// The precedent database. Cheap to share behind an `Arc`; appends are
/// serialized internally, reads run concurrently.
pub struct PrecedentDb {
    path: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    state: RwLock<State>,
}

impl fmt::Debug for PrecedentDb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrecedentDb")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl PrecedentDb {
    /// A database that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            clock: Arc::new(SystemClock),
            state: RwLock::new(State {
                records: Vec::new(),
                next_id: 1,
                writer: None,
            }),
        }
    }

    /// Opens (or creates) a database file for reading and appending. Holds an
    /// exclusive advisory lock on the file until dropped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let writer = OpenOptions::new().create(true).append(true).open(&path)?;
        writer
            .try_lock()
            .map_err(|_| StoreError::Locked(path.clone()))?;
        let records = read_records(&path)?;
        let next_id = records.last().map_or(1, |r| r.id + 1);
        Ok(Self {
            path: Some(path),
            clock: Arc::new(SystemClock),
            state: RwLock::new(State {
                records,
                next_id,
                writer: Some(writer),
            }),
        })
    }

    /// Loads a database file without taking the writer lock. Appends on the
    /// result stay in memory.
    pub fn load_read_only(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let records = read_records(path.as_ref())?;
        let next_id = records.last().map_or(1, |r| r.id + 1);
        Ok(Self {
            path: None,
            clock: Arc::new(SystemClock),
            state: RwLock::new(State {
                records,
                next_id,
                writer: None,
            }),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Validates, assigns an id, persists, and returns the id.
    pub fn append(
        &self,
        draft: PrecedentDraft,
        catalog: &PolicyCatalog,
    ) -> Result<PrecedentId, StoreError> {
        draft.validate(catalog)?;
        let mut state = self.state.write().expect("store lock poisoned");
        let record = Precedent {
            id: state.next_id,
            image: draft.image,
            caption: draft.caption,
            label: draft.label,
            rationale: draft.rationale,
            policy_id: crate::policy::normalize_id(&draft.policy_id),
            provenance: draft.provenance,
            image_embedding: draft.image_embedding,
            caption_embedding: draft.caption_embedding,
            created_at: self.clock.now(),
        };
        if let Some(file) = state.writer.as_mut() {
            let mut line = serde_json::to_string(&record)
                .map_err(|e| StoreError::StorageFailure(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        let id = record.id;
        state.records.push(Arc::new(record));
        state.next_id = id + 1;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("store lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: PrecedentId) -> Option<Precedent> {
        let state = self.state.read().expect("store lock poisoned");
        state
            .records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| (*state.records[i]).clone())
    }

    /// Runs `f` over the id-ordered records under a shared read lock.
    pub fn read<R>(&self, f: impl FnOnce(&[Arc<Precedent>]) -> R) -> R {
        let state = self.state.read().expect("store lock poisoned");
        f(&state.records)
    }

    pub fn records(&self) -> Vec<Precedent> {
        self.read(|rs| rs.iter().map(|r| (**r).clone()).collect())
    }

    /// Records matching every provided predicate, in id order.
    pub fn filter(&self, filter: &PrecedentFilter) -> Vec<Precedent> {
        self.read(|rs| {
            rs.iter()
                .filter(|r| filter.matches(r))
                .map(|r| (**r).clone())
                .collect()
        })
    }

    /// One page of matching records with ids greater than `after`. The
    /// second value is the cursor for the next page, if any records remain.
    pub fn page(
        &self,
        filter: &PrecedentFilter,
        after: Option<PrecedentId>,
        limit: usize,
    ) -> (Vec<Precedent>, Option<PrecedentId>) {
        self.read(|rs| {
            let mut matching = rs
                .iter()
                .filter(|r| after.is_none_or(|a| r.id > a) && filter.matches(r));
            let items: Vec<Precedent> = matching
                .by_ref()
                .take(limit)
                .map(|r| (**r).clone())
                .collect();
            let more = matching.next().is_some();
            let cursor = if more { items.last().map(|r| r.id) } else { None };
            (items, cursor)
        })
    }

    pub fn count_by(&self, filter: &PrecedentFilter) -> usize {
        self.read(|rs| rs.iter().filter(|r| filter.matches(r)).count())
    }

    pub fn to_jsonl(&self) -> String {
        self.read(|rs| {
            let mut out = String::new();
            for r in rs {
                out.push_str(&serde_json::to_string(&**r).expect("precedent serializes"));
                out.push('\n');
            }
            out
        })
    }

    /// Writes every record to `path`, replacing its contents.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut file = File::create(path)?;
        file.write_all(self.to_jsonl().as_bytes())?;
        file.sync_all()?;
        Ok(())
    }
}

fn read_records(path: &Path) -> Result<Vec<Arc<Precedent>>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut records: Vec<Arc<Precedent>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Precedent = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if records.last().is_some_and(|prev| prev.id >= record.id) {
            return Err(StoreError::Corrupt {
                line: idx + 1,
                reason: format!("id {} is not strictly increasing", record.id),
            });
        }
        records.push(Arc::new(record));
    }
    Ok(records)
}

/// How much of a labeled batch was converted into stored precedents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub attempted: usize,
    pub stored: usize,
    pub discarded: usize,
    pub pct: f64,
    pub pct_first_pass: f64,
    pub pct_revised: f64,
}

impl UtilizationStats {
    pub fn from_counts(
        attempted: usize,
        first_pass: usize,
        revised: usize,
    ) -> Result<Self, StoreError> {
        let stored = first_pass + revised;
        if attempted < stored {
            return Err(StoreError::AttemptedLessThanStored { attempted, stored });
        }
        let frac = |n: usize| {
            if attempted == 0 {
                0.0
            } else {
                n as f64 / attempted as f64
            }
        };
        Ok(Self {
            attempted,
            stored,
            discarded: attempted - stored,
            pct: frac(stored),
            pct_first_pass: frac(first_pass),
            pct_revised: frac(revised),
        })
    }
}

/// Utilization of `attempted` examples given the precedents held in `db`.
pub fn utilization_stats(attempted: usize, db: &PrecedentDb) -> Result<UtilizationStats, StoreError> {
    let (first, revised) = db.read(|rs| {
        rs.iter().fold((0, 0), |(f, r), p| match p.provenance {
            Provenance::FirstPass => (f + 1, r),
            Provenance::Revised => (f, r + 1),
        })
    });
    UtilizationStats::from_counts(attempted, first, revised)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::seed_unsafebench_catalog;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn draft(policy: &str, provenance: Provenance, label: PvLabel) -> PrecedentDraft {
        PrecedentDraft {
            image: ImageRef {
                locator: format!("img/{policy}.png"),
                content_hash: Some("ab".repeat(32)),
            },
            caption: "a crowd holding signs".into(),
            label,
            rationale: "the signs carry campaign slogans".into(),
            policy_id: policy.into(),
            provenance,
            image_embedding: Some(EmbeddingVector::new(vec![0.6, 0.8]).unwrap()),
            caption_embedding: None,
        }
    }

    fn clock() -> Arc<dyn Clock> {
        Arc::new(FixedClock(Utc.with_ymd_and_hms(2025, 1, 2, 3, 4, 5).unwrap()))
    }

    #[test]
    fn first_append_gets_id_one() {
        let db = PrecedentDb::in_memory();
        let id = db
            .append(draft("hate", Provenance::FirstPass, PvLabel::Violating), &seed_unsafebench_catalog())
            .unwrap();
        assert_eq!(id, 1);
    }

    #[test]
    fn empty_rationale_is_invalid() {
        let db = PrecedentDb::in_memory();
        let mut d = draft("hate", Provenance::FirstPass, PvLabel::Violating);
        d.rationale = " ".into();
        let err = db.append(d, &seed_unsafebench_catalog()).unwrap_err();
        assert!(matches!(err, StoreError::InvalidPrecedent("rationale")));
        assert!(db.is_empty());
    }

    #[test]
    fn unknown_policy_is_invalid() {
        let db = PrecedentDb::in_memory();
        let err = db
            .append(draft("nope", Provenance::FirstPass, PvLabel::Violating), &seed_unsafebench_catalog())
            .unwrap_err();
        assert!(matches!(err, StoreError::InvalidPrecedent("policy_id")));
    }

    #[test]
    fn line_has_fixed_field_order() {
        let db = PrecedentDb::in_memory().with_clock(clock());
        db.append(draft("hate", Provenance::FirstPass, PvLabel::Violating), &seed_unsafebench_catalog())
            .unwrap();
        let line = db.to_jsonl();
        let expected = format!(
            "{{\"id\":1,\"image\":{{\"locator\":\"img/hate.png\",\"content_hash\":\"{}\"}},\"caption\":\"a crowd holding signs\",\"label\":\"PV\",\"rationale\":\"the signs carry campaign slogans\",\"policy_id\":\"hate\",\"provenance\":\"FirstPass\",\"image_embedding\":[0.6,0.8],\"caption_embedding\":null,\"created_at\":\"2025-01-02T03:04:05Z\"}}\n",
            "ab".repeat(32)
        );
        assert_eq!(line, expected);
    }

    #[test]
    fn hundred_records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("precedents.jsonl");
        let catalog = seed_unsafebench_catalog();
        let policies: Vec<String> = catalog.ids().map(String::from).collect();
        let written = {
            let db = PrecedentDb::open(&path).unwrap().with_clock(clock());
            for i in 0..100 {
                let mut d = draft(&policies[i % policies.len()], Provenance::FirstPass, PvLabel::from_violating(i % 3 == 0));
                d.caption = format!("caption {i}");
                db.append(d, &catalog).unwrap();
            }
            db.records()
        };
        let reopened = PrecedentDb::open(&path).unwrap();
        assert_eq!(reopened.records(), written);
        // ids continue after restart
        let id = reopened
            .append(draft("spam", Provenance::Revised, PvLabel::Violating), &catalog)
            .unwrap();
        assert_eq!(id, 101);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.jsonl");
        let _first = PrecedentDb::open(&path).unwrap();
        assert!(matches!(PrecedentDb::open(&path), Err(StoreError::Locked(_))));
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(
            PrecedentDb::load_read_only(&path),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn filter_examples() {
        let catalog = seed_unsafebench_catalog();
        let db = PrecedentDb::in_memory();
        for _ in 0..3 {
            db.append(draft("sexual", Provenance::FirstPass, PvLabel::Violating), &catalog).unwrap();
        }
        for _ in 0..2 {
            db.append(draft("hate", Provenance::FirstPass, PvLabel::NonViolating), &catalog).unwrap();
        }
        assert_eq!(db.filter(&PrecedentFilter::policy("sexual")).len(), 3);
        assert_eq!(db.filter(&PrecedentFilter::default()).len(), 5);
        let revised = PrecedentFilter {
            provenance: Some(Provenance::Revised),
            ..Default::default()
        };
        assert!(db.filter(&revised).is_empty());
        assert!(db.filter(&PrecedentFilter::policy("unknown")).is_empty());
    }

    #[test]
    fn paging_walks_all_records() {
        let catalog = seed_unsafebench_catalog();
        let db = PrecedentDb::in_memory();
        for _ in 0..5 {
            db.append(draft("hate", Provenance::FirstPass, PvLabel::Violating), &catalog).unwrap();
        }
        let all = PrecedentFilter::default();
        let (p1, c1) = db.page(&all, None, 2);
        assert_eq!(p1.iter().map(|p| p.id).collect::<Vec<_>>(), [1, 2]);
        let (p2, c2) = db.page(&all, c1, 2);
        assert_eq!(p2.iter().map(|p| p.id).collect::<Vec<_>>(), [3, 4]);
        let (p3, c3) = db.page(&all, c2, 2);
        assert_eq!(p3.iter().map(|p| p.id).collect::<Vec<_>>(), [5]);
        assert_eq!(c3, None);
        let (exact, cursor) = db.page(&all, None, 5);
        assert_eq!(exact.len(), 5);
        assert_eq!(cursor, None);
    }

    #[test]
    fn utilization_examples() {
        let s = UtilizationStats::from_counts(1000, 902, 0).unwrap();
        assert!((s.pct - 0.902).abs() < 1e-12);
        let z = UtilizationStats::from_counts(0, 0, 0).unwrap();
        assert_eq!((z.pct, z.pct_first_pass, z.pct_revised), (0.0, 0.0, 0.0));
        let s = UtilizationStats::from_counts(8, 5, 1).unwrap();
        assert_eq!(s.pct, 0.75);
        assert_eq!(s.pct_first_pass, 0.625);
        assert_eq!(s.pct_revised, 0.125);
        assert_eq!(s.discarded, 2);
        assert!(matches!(
            UtilizationStats::from_counts(1, 2, 0),
            Err(StoreError::AttemptedLessThanStored { .. })
        ));
    }

    #[test]
    fn utilization_from_db() {
        let catalog = seed_unsafebench_catalog();
        let db = PrecedentDb::in_memory();
        for _ in 0..5 {
            db.append(draft("hate", Provenance::FirstPass, PvLabel::Violating), &catalog).unwrap();
        }
        db.append(draft("hate", Provenance::Revised, PvLabel::Violating), &catalog).unwrap();
        let s = utilization_stats(8, &db).unwrap();
        assert_eq!((s.pct, s.pct_first_pass, s.pct_revised), (0.75, 0.625, 0.125));
    }

    fn arb_draft() -> impl Strategy<Value = PrecedentDraft> {
        let policies = seed_unsafebench_catalog().ids().map(String::from).collect::<Vec<_>>();
        (
            "[a-z ]{1,20}[a-z]",
            "[a-zA-Z\"\\\\ é]{0,20}x",
            any::<bool>(),
            any::<bool>(),
            proptest::sample::select(policies),
            proptest::option::of(proptest::collection::vec(-1.0f32..1.0, 3)),
        )
            .prop_map(|(caption, rationale, pv, revised, policy, emb)| PrecedentDraft {
                image: ImageRef::new(format!("{caption}.png")),
                caption,
                label: PvLabel::from_violating(pv),
                rationale,
                policy_id: policy,
                provenance: if revised { Provenance::Revised } else { Provenance::FirstPass },
                image_embedding: emb.and_then(|v| EmbeddingVector::new(v).ok()),
                caption_embedding: None,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn jsonl_round_trip(drafts in proptest::collection::vec(arb_draft(), 0..20)) {
            let catalog = seed_unsafebench_catalog();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("db.jsonl");
            let db = PrecedentDb::open(&path).unwrap();
            for d in drafts {
                db.append(d, &catalog).unwrap();
            }
            let reloaded = PrecedentDb::load_read_only(&path).unwrap();
            prop_assert_eq!(reloaded.records(), db.records());
            prop_assert_eq!(reloaded.to_jsonl(), db.to_jsonl());
        }

        #[test]
        fn filter_equals_naive_scan(
            drafts in proptest::collection::vec(arb_draft(), 0..30),
            policy in proptest::option::of(proptest::sample::select(vec!["hate", "spam", "sexual"])),
            prov in proptest::option::of(any::<bool>()),
            label in proptest::option::of(any::<bool>()),
        ) {
            let catalog = seed_unsafebench_catalog();
            let db = PrecedentDb::in_memory();
            for d in drafts {
                db.append(d, &catalog).unwrap();
            }
            let f = PrecedentFilter {
                policy_id: policy.map(String::from),
                provenance: prov.map(|r| if r { Provenance::Revised } else { Provenance::FirstPass }),
                label: label.map(PvLabel::from_violating),
            };
            let mut naive = Vec::new();
            for r in db.records() {
                let ok_policy = match &f.policy_id { Some(p) => &r.policy_id == p, None => true };
                let ok_prov = match f.provenance { Some(p) => r.provenance == p, None => true };
                let ok_label = match f.label { Some(l) => r.label == l, None => true };
                if ok_policy && ok_prov && ok_label {
                    naive.push(r);
                }
            }
            prop_assert_eq!(db.filter(&f), naive);
        }
    }
}
