//! Exact nearest-precedent retrieval by cosine similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingVector};
use crate::store::{Precedent, PrecedentDb};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("query has {query} dims but precedent {precedent_id} has {stored}")]
    DimensionMismatch {
        query: usize,
        stored: usize,
        precedent_id: u64,
    },
    #[error("similarity threshold {0} is outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Which embedding the query is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalSubject {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Always take the most similar precedent.
    Closest,
    /// Take the most similar precedent whose similarity is at least `min_sim`.
    Threshold { min_sim: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub subject: RetrievalSubject,
    pub mode: RetrievalMode,
    pub include_policy: bool,
    pub include_rationale: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            subject: RetrievalSubject::Image,
            mode: RetrievalMode::Threshold { min_sim: 0.8 },
            include_policy: true,
            include_rationale: true,
        }
    }
}

impl RetrievalConfig {
    pub fn closest(subject: RetrievalSubject) -> Self {
        Self {
            subject,
            mode: RetrievalMode::Closest,
            ..Self::default()
        }
    }

    pub fn threshold(subject: RetrievalSubject, min_sim: f64) -> Result<Self, RetrievalError> {
        let cfg = Self {
            subject,
            mode: RetrievalMode::Threshold { min_sim },
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if let RetrievalMode::Threshold { min_sim } = self.mode {
            if !(-1.0..=1.0).contains(&min_sim) || min_sim.is_nan() {
                return Err(RetrievalError::InvalidThreshold(min_sim));
            }
        }
        Ok(())
    }
}

fn subject_embedding(p: &Precedent, subject: RetrievalSubject) -> Option<&EmbeddingVector> {
    match subject {
        RetrievalSubject::Image => p.image_embedding.as_ref(),
        RetrievalSubject::Text => p.caption_embedding.as_ref(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub precedent: Precedent,
    pub similarity: f64,
}

/// Linear scan in id order. Ties keep the lowest id; precedents without an
/// embedding for the configured subject are skipped.
pub fn retrieve(
    query: &EmbeddingVector,
    db: &PrecedentDb,
    cfg: &RetrievalConfig,
) -> Result<Option<Retrieved>, RetrievalError> {
    cfg.validate()?;
    let min_sim = match cfg.mode {
        RetrievalMode::Closest => None,
        RetrievalMode::Threshold { min_sim } => Some(min_sim),
    };
    db.read(|records| {
        let mut best: Option<(usize, f64)> = None;
        for (idx, p) in records.iter().enumerate() {
            let Some(emb) = subject_embedding(p, cfg.subject) else {
                continue;
            };
            if emb.dims() != query.dims() {
                return Err(RetrievalError::DimensionMismatch {
                    query: query.dims(),
                    stored: emb.dims(),
                    precedent_id: p.id,
                });
            }
            let sim = cosine_similarity(query, emb)?;
            if min_sim.is_some_and(|m| sim < m) {
                continue;
            }
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((idx, sim));
            }
        }
        Ok(best.map(|(idx, similarity)| Retrieved {
            precedent: (*records[idx]).clone(),
            similarity,
        }))
    })
}
