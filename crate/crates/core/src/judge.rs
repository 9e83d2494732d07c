//! Precedent-conditioned inference: caption the image, retrieve the nearest
//! precedent, and ask for a YES/NO verdict under that precedent's policy and
//! rationale. When nothing is retrieved the whole catalog goes into the
//! prompt instead.

use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedInput, EmbedderError, Embedders};
use crate::gateway::{BackendHandle, Conversation, GatewayError};
use crate::image::{ImageError, ImageRef, LoadedImage};
use crate::policy::PolicyCatalog;
use crate::prompt::{icl_judge_prompt, parse_verdict, precedent_judge_prompt, render, Bindings, Template};
use crate::retrieval::{retrieve, RetrievalConfig, RetrievalError, RetrievalSubject};
use crate::store::{PrecedentDb, PrecedentId, PvLabel};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("could not parse a verdict from {raw:?}")]
    UnparseableVerdict { raw: String },
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(#[from] EmbedderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeMode {
    PrecedentRag,
    IclFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: PvLabel,
    /// Policy of the retrieved precedent; none in fallback mode.
    pub policy_id: Option<String>,
    /// Rationale placed in the prompt, if any.
    pub rationale_context: Option<String>,
    pub precedent_id: Option<PrecedentId>,
    pub similarity: Option<f64>,
    pub mode: JudgeMode,
    pub caption: String,
    pub prompt: String,
    pub raw_reply: String,
}

#[derive(Clone)]
pub struct Judge {
    backend: BackendHandle,
    embedders: Embedders,
    catalog: Arc<PolicyCatalog>,
    cfg: RetrievalConfig,
    model_id: String,
}

impl Judge {
    pub fn new(
        backend: BackendHandle,
        embedders: Embedders,
        catalog: Arc<PolicyCatalog>,
        cfg: RetrievalConfig,
    ) -> Self {
        Self {
            backend,
            embedders,
            catalog,
            cfg,
            model_id: "default".into(),
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> &PolicyCatalog {
        &self.catalog
    }

    pub async fn judge_image(&self, image: &LoadedImage, db: &PrecedentDb) -> Result<Verdict, JudgeError> {
        self.judge_traced(image, db).await.map(|(v, _)| v)
    }

    /// Loads the image behind `image` and judges it.
    pub async fn judge_ref(&self, image: &ImageRef, db: &PrecedentDb) -> Result<Verdict, JudgeError> {
        let loaded = LoadedImage::resolve(image).await?;
        self.judge_image(&loaded, db).await
    }

    /// Like [`Judge::judge_image`] but also returns the conversation.
    pub async fn judge_traced(
        &self,
        image: &LoadedImage,
        db: &PrecedentDb,
    ) -> Result<(Verdict, Conversation), JudgeError> {
        let mut conv = Conversation::new(self.model_id.clone());
        let caption_prompt = render(Template::CaptionRequest, &Bindings::new()).expect("no bindings needed");
        conv.push_user_with_image(caption_prompt, image);
        let caption = self.backend.exchange(&mut conv).await?;

        let query = match self.cfg.subject {
            RetrievalSubject::Image => {
                self.embedders
                    .image
                    .embed_one(EmbedInput::Image(image.bytes.clone()))
                    .await?
            }
            RetrievalSubject::Text => {
                self.embedders
                    .text
                    .embed_one(EmbedInput::Text(caption.clone()))
                    .await?
            }
        };
        let hit = retrieve(&query, db, &self.cfg)?;

        let (prompt, policy_id, rationale_context, precedent_id, similarity, mode) = match &hit {
            Some(r) => {
                let p = &r.precedent;
                let policy = self.catalog.get(&p.policy_id);
                let rationale = self.cfg.include_rationale.then(|| p.rationale.clone());
                let prompt = precedent_judge_prompt(
                    policy.filter(|_| self.cfg.include_policy),
                    rationale.as_deref(),
                )
                .expect("precedent prompt bindings are complete");
                (
                    prompt,
                    Some(p.policy_id.clone()),
                    rationale,
                    Some(p.id),
                    Some(r.similarity),
                    JudgeMode::PrecedentRag,
                )
            }
            None => (
                icl_judge_prompt(&self.catalog).expect("icl prompt bindings are complete"),
                None,
                None,
                None,
                None,
                JudgeMode::IclFallback,
            ),
        };
        conv.push_user(prompt.clone());
        let raw_reply = self.backend.exchange(&mut conv).await?;
        let label = parse_verdict(&raw_reply)
            .map_err(|_| JudgeError::UnparseableVerdict { raw: raw_reply.clone() })?
            .label;
        Ok((
            Verdict {
                label,
                policy_id,
                rationale_context,
                precedent_id,
                similarity,
                mode,
                caption,
                prompt,
                raw_reply,
            },
            conv,
        ))
    }

    /// Judges every image with up to `parallelism` in flight; results follow
    /// input order and failures stay in their slot.
    pub async fn judge_batch(
        &self,
        images: &[ImageRef],
        db: &PrecedentDb,
        parallelism: usize,
    ) -> Vec<Result<Verdict, JudgeError>> {
        stream::iter(images)
            .map(|img| self.judge_ref(img, db))
            .buffered(parallelism.max(1))
            .collect()
            .await
    }
}
