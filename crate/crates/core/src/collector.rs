//! Precedent collection with one critique-revise round.
//!
//! For each labeled example the model captions the image, judges it against
//! the example's policy, then explains its own answer. A correct judgment
//! stores `(image, caption, label, rationale, policy)`. A wrong (or
//! unparseable) one triggers a single critique of the caption, a revised
//! caption, a caption-based re-judgment, and a second rationale; the
//! revised trace is stored only if the new judgment matches the label.
//! The rationale is always requested after the model's own answer and never
//! conditioned on the ground truth.

use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedInput, Embedders};
use crate::gateway::{BackendHandle, ChatTurn, Conversation, GatewayError, Role};
use crate::image::{ImageRef, LoadedImage};
use crate::policy::{Policy, PolicyCatalog};
use crate::prompt::{parse_rationale, parse_verdict, render, Bindings, Template};
use crate::store::{
    PrecedentDb, PrecedentDraft, PrecedentId, Provenance, PvLabel, StoreError, UtilizationStats,
};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("precedent database is empty")]
    EmptyDatabase,
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// An image with its ground-truth label under one policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: ImageRef,
    pub label: PvLabel,
    pub policy_id: String,
    #[serde(default)]
    pub split: Split,
}

impl LabeledExample {
    pub fn new(locator: impl Into<String>, label: PvLabel, policy_id: impl Into<String>) -> Self {
        Self {
            image: ImageRef::new(locator),
            label,
            policy_id: policy_id.into(),
            split: Split::Train,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollectionStatus {
    StoredFirstPass,
    StoredRevised,
    Discarded,
}

/// Why an example produced no precedent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail")]
pub enum DiscardReason {
    /// First judgment wrong and critique-revise disabled.
    WrongFirstPass,
    /// Both judgments disagreed with the label.
    WrongTwice,
    /// The final judgment could not be parsed.
    UnparseableVerdict,
    /// Judgment was correct but no usable rationale came back.
    RationaleFailed,
    Backend(String),
    ImageUnreadable(String),
    Embedder(String),
}

impl DiscardReason {
    /// Anything other than a plain misprediction is flagged for review.
    pub fn is_flagged(&self) -> bool {
        !matches!(self, DiscardReason::WrongFirstPass | DiscardReason::WrongTwice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionOutcome {
    pub status: CollectionStatus,
    pub precedent_id: Option<PrecedentId>,
    pub transcript: Conversation,
    pub first_prediction: Option<PvLabel>,
    pub second_prediction: Option<PvLabel>,
    pub discard_reason: Option<DiscardReason>,
}

impl CollectionOutcome {
    pub fn is_stored(&self) -> bool {
        self.status != CollectionStatus::Discarded
    }

    pub fn flagged(&self) -> bool {
        self.discard_reason.as_ref().is_some_and(DiscardReason::is_flagged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectorConfig {
    pub model_id: String,
    /// Run the critique-revise round after a wrong first judgment.
    pub critique_revise: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            model_id: "default".into(),
            critique_revise: true,
        }
    }
}

#[derive(Debug)]
pub struct BatchResult {
    pub outcomes: Vec<Result<CollectionOutcome, CollectError>>,
    pub stats: UtilizationStats,
}

/// Runs the collection loop against one backend.
#[derive(Clone)]
pub struct Collector {
    backend: BackendHandle,
    catalog: Arc<PolicyCatalog>,
    embedders: Option<Embedders>,
    config: CollectorConfig,
}

/// Early exit from a pipeline with the reason the example was discarded.
struct Discard(DiscardReason);

impl From<GatewayError> for Discard {
    fn from(e: GatewayError) -> Self {
        Discard(DiscardReason::Backend(e.to_string()))
    }
}

struct Trace {
    conv: Conversation,
    first: Option<PvLabel>,
    second: Option<PvLabel>,
}

impl Collector {
    pub fn new(backend: BackendHandle, catalog: Arc<PolicyCatalog>) -> Self {
        Self {
            backend,
            catalog,
            embedders: None,
            config: CollectorConfig::default(),
        }
    }

    /// Embed stored precedents so they are retrievable.
    pub fn with_embedders(mut self, embedders: Embedders) -> Self {
        self.embedders = Some(embedders);
        self
    }

    pub fn with_config(mut self, config: CollectorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn config(&self) -> &CollectorConfig {
        &self.config
    }

    pub fn catalog(&self) -> &PolicyCatalog {
        &self.catalog
    }

    pub async fn collect_one(
        &self,
        example: &LabeledExample,
        db: &PrecedentDb,
    ) -> Result<CollectionOutcome, CollectError> {
        let policy = self
            .catalog
            .get(&example.policy_id)
            .ok_or_else(|| CollectError::UnknownPolicy(example.policy_id.clone()))?;
        let mut trace = Trace {
            conv: Conversation::new(self.config.model_id.clone()),
            first: None,
            second: None,
        };
        let result = self.run(example, policy, &mut trace).await;
        let discarded = |reason: DiscardReason, trace: Trace| CollectionOutcome {
            status: CollectionStatus::Discarded,
            precedent_id: None,
            transcript: trace.conv,
            first_prediction: trace.first,
            second_prediction: trace.second,
            discard_reason: Some(reason),
        };
        let (draft, loaded) = match result {
            Ok(v) => v,
            Err(Discard(reason)) => return Ok(discarded(reason, trace)),
        };
        let draft = match self.embed(draft, &loaded).await {
            Ok(d) => d,
            Err(reason) => return Ok(discarded(reason, trace)),
        };
        let status = match draft.provenance {
            Provenance::FirstPass => CollectionStatus::StoredFirstPass,
            Provenance::Revised => CollectionStatus::StoredRevised,
        };
        let id = db.append(draft, &self.catalog)?;
        Ok(CollectionOutcome {
            status,
            precedent_id: Some(id),
            transcript: trace.conv,
            first_prediction: trace.first,
            second_prediction: trace.second,
            discard_reason: None,
        })
    }

    async fn run(
        &self,
        example: &LabeledExample,
        policy: &Policy,
        trace: &mut Trace,
    ) -> Result<(PrecedentDraft, LoadedImage), Discard> {
        let loaded = LoadedImage::resolve(&example.image)
            .await
            .map_err(|e| Discard(DiscardReason::ImageUnreadable(e.to_string())))?;
        let policy_bindings = Bindings::new().policy(policy);
        let conv = &mut trace.conv;

        // First iteration: caption, judge, rationale.
        conv.push_user_with_image(prompt(Template::CaptionRequest, &Bindings::new()), &loaded);
        let caption = self.backend.exchange(conv).await?;
        conv.push_user(prompt(Template::FirstPassJudge, &policy_bindings));
        let reply = self.backend.exchange(conv).await?;
        trace.first = parse_verdict(&reply).ok().map(|v| v.label);
        conv.push_user(prompt(Template::RationaleRequest, &Bindings::new()));
        let rationale = self.backend.exchange(conv).await?;

        if trace.first == Some(example.label) {
            let rationale = parse_rationale(&rationale)
                .map_err(|_| Discard(DiscardReason::RationaleFailed))?
                .rationale;
            return Ok((
                draft(example, caption, rationale, Provenance::FirstPass, &loaded),
                loaded,
            ));
        }
        if !self.config.critique_revise {
            return Err(Discard(match trace.first {
                Some(_) => DiscardReason::WrongFirstPass,
                None => DiscardReason::UnparseableVerdict,
            }));
        }

        // Second iteration: critique, revise, re-judge on the caption, rationale.
        conv.push_user(prompt(
            Template::CritiqueRequest,
            &Bindings::new().with("caption", caption).with("policy", policy.name.clone()),
        ));
        self.backend.exchange(conv).await?;
        conv.push_user(prompt(Template::ReviseRequest, &Bindings::new()));
        let revised = self.backend.exchange(conv).await?;
        conv.push_user(prompt(Template::RevisedJudge, &policy_bindings));
        let reply = self.backend.exchange(conv).await?;
        trace.second = parse_verdict(&reply).ok().map(|v| v.label);
        conv.push_user(prompt(Template::RationaleRequest, &Bindings::new()));
        let rationale = self.backend.exchange(conv).await?;

        match trace.second {
            Some(label) if label == example.label => {
                let rationale = parse_rationale(&rationale)
                    .map_err(|_| Discard(DiscardReason::RationaleFailed))?
                    .rationale;
                Ok((
                    draft(example, revised, rationale, Provenance::Revised, &loaded),
                    loaded,
                ))
            }
            Some(_) => Err(Discard(DiscardReason::WrongTwice)),
            None => Err(Discard(DiscardReason::UnparseableVerdict)),
        }
    }

    async fn embed(&self, mut draft: PrecedentDraft, loaded: &LoadedImage) -> Result<PrecedentDraft, DiscardReason> {
        let Some(e) = &self.embedders else {
            return Ok(draft);
        };
        let fail = |err: crate::embedding::EmbedderError| DiscardReason::Embedder(err.to_string());
        let img = e.image.embed_one(EmbedInput::Image(loaded.bytes.clone())).await.map_err(fail)?;
        let txt = e.text.embed_one(EmbedInput::Text(draft.caption.clone())).await.map_err(fail)?;
        draft.image_embedding = Some(img.into_normalized().map_err(|e| DiscardReason::Embedder(e.to_string()))?);
        draft.caption_embedding = Some(txt.into_normalized().map_err(|e| DiscardReason::Embedder(e.to_string()))?);
        Ok(draft)
    }

    /// Collects every example once with up to `parallelism` pipelines in
    /// flight. Outcomes follow input order; per-example errors never abort
    /// the batch.
    pub async fn collect_batch(
        &self,
        examples: &[LabeledExample],
        db: &PrecedentDb,
        parallelism: usize,
    ) -> BatchResult {
        let outcomes: Vec<_> = stream::iter(examples)
            .map(|ex| self.collect_one(ex, db))
            .buffered(parallelism.max(1))
            .collect()
            .await;
        let (mut first, mut revised) = (0, 0);
        for o in outcomes.iter().flatten() {
            match o.status {
                CollectionStatus::StoredFirstPass => first += 1,
                CollectionStatus::StoredRevised => revised += 1,
                CollectionStatus::Discarded => {}
            }
        }
        let stats = UtilizationStats::from_counts(examples.len(), first, revised)
            .expect("stored never exceeds attempted");
        BatchResult { outcomes, stats }
    }
}

fn prompt(t: Template, b: &Bindings) -> String {
    render(t, b).expect("collector supplies every binding")
}

fn draft(
    example: &LabeledExample,
    caption: String,
    rationale: String,
    provenance: Provenance,
    loaded: &LoadedImage,
) -> PrecedentDraft {
    PrecedentDraft {
        image: loaded.image.clone(),
        caption,
        label: example.label,
        rationale,
        policy_id: example.policy_id.clone(),
        provenance,
        image_embedding: None,
        caption_embedding: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub precedent_id: PrecedentId,
    pub policy_id: String,
    pub label: PvLabel,
    pub messages: Vec<ChatTurn>,
}

/// Builds the supervised pair for one precedent: image to stored caption,
/// then the policy judgment to its YES/NO label.
pub fn finetune_record(
    p: &crate::store::Precedent,
    catalog: &PolicyCatalog,
) -> Result<FinetuneRecord, ExportError> {
    let policy = catalog.get(&p.policy_id).ok_or_else(|| {
        ExportError::StorageFailure(format!("precedent {} has unknown policy {}", p.id, p.policy_id))
    })?;
    let messages = vec![
        ChatTurn {
            role: Role::User,
            text: render(Template::CaptionRequest, &Bindings::new())?,
            image: Some(p.image.clone()),
        },
        ChatTurn {
            role: Role::Assistant,
            text: p.caption.clone(),
            image: None,
        },
        ChatTurn {
            role: Role::User,
            text: render(Template::FirstPassJudge, &Bindings::new().policy(policy))?,
            image: None,
        },
        ChatTurn {
            role: Role::Assistant,
            text: p.label.as_answer().to_string(),
            image: None,
        },
    ];
    Ok(FinetuneRecord {
        precedent_id: p.id,
        policy_id: p.policy_id.clone(),
        label: p.label,
        messages,
    })
}

/// Writes one JSON line per precedent and returns the count.
pub fn export_finetune_dataset(
    db: &PrecedentDb,
    catalog: &PolicyCatalog,
    path: impl AsRef<Path>,
) -> Result<usize, ExportError> {
    let records = db.records();
    if records.is_empty() {
        return Err(ExportError::EmptyDatabase);
    }
    let mut out = String::new();
    for p in &records {
        let rec = finetune_record(p, catalog)?;
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| ExportError::StorageFailure(e.to_string()))?;
    Ok(records.len())
}
