//! Embedding vectors, cosine similarity, and embedder backends.
//!
//! Two backends are provided: [`HttpEmbedder`] talks to an external
//! embedding service, and [`HashEmbedder`] maps input bytes to a
//! deterministic pseudo-random unit vector for offline use.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{ImageError, LoadedImage};
use crate::retry::RetryPolicy;
use crate::store::Precedent;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding has no dimensions")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedderError {
    #[error("embedder unavailable: {0}")]
    Unavailable(String),
    #[error("embedder returned a malformed reply: {0}")]
    Malformed(String),
    #[error("{kind:?} embedder cannot embed this input")]
    WrongKind { kind: EmbedKind },
    #[error(transparent)]
    ImageUnreadable(#[from] ImageError),
    #[error("caption is empty")]
    EmptyCaption,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A fixed-dimension float vector. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        Ok(Self {
            normalized: (norm - 1.0).abs() <= NORM_TOLERANCE,
            values,
        })
    }

    /// Builds a unit vector pointing the same way as `values`.
    pub fn normalized_from(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        Self::new(values)?.into_normalized()
    }

    pub fn into_normalized(self) -> Result<Self, EmbeddingError> {
        if self.normalized {
            return Ok(self);
        }
        let norm = l2_norm(&self.values);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        let values = self
            .values
            .iter()
            .map(|v| (*v as f64 / norm) as f32)
            .collect();
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
}

impl Serialize for EmbeddingVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(d)?;
        EmbeddingVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dims() != b.dims() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Image,
    Text,
}

#[derive(Debug, Clone)]
pub enum EmbedInput {
    Image(Arc<[u8]>),
    Text(String),
}

impl EmbedInput {
    pub fn kind(&self) -> EmbedKind {
        match self {
            EmbedInput::Image(_) => EmbedKind::Image,
            EmbedInput::Text(_) => EmbedKind::Text,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        match self {
            EmbedInput::Image(b) => b,
            EmbedInput::Text(t) => t.as_bytes(),
        }
    }
}

/// A deterministic embedding backend: the same input always yields the same
/// vector.
#[async_trait]
pub trait Embedder: Send + Sync {
    fn kind(&self) -> EmbedKind;
    fn dims(&self) -> usize;
    async fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<EmbeddingVector>, EmbedderError>;

    async fn embed_one(&self, input: EmbedInput) -> Result<EmbeddingVector, EmbedderError> {
        let mut out = self.embed(std::slice::from_ref(&input)).await?;
        out.pop()
            .ok_or_else(|| EmbedderError::Malformed("no vector returned".into()))
    }
}

fn check_kind(kind: EmbedKind, inputs: &[EmbedInput]) -> Result<(), EmbedderError> {
    if inputs.iter().any(|i| i.kind() != kind) {
        return Err(EmbedderError::WrongKind { kind });
    }
    Ok(())
}

/// Hashes input bytes into a seed and draws a Gaussian direction from it.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    kind: EmbedKind,
    dims: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(kind: EmbedKind, dims: usize, seed: u64) -> Self {
        assert!(dims > 0, "embedder dims must be positive");
        Self { kind, dims, seed }
    }

    pub fn image(dims: usize) -> Self {
        Self::new(EmbedKind::Image, dims, 0)
    }

    pub fn text(dims: usize) -> Self {
        Self::new(EmbedKind::Text, dims, 0)
    }

    pub fn vector_for(&self, bytes: &[u8]) -> EmbeddingVector {
        hashed_direction(self.seed, self.kind, bytes, self.dims)
    }
}

/// Unit vector drawn from a ChaCha stream seeded by `sha256(seed || kind || bytes)`.
pub fn hashed_direction(seed: u64, kind: EmbedKind, bytes: &[u8], dims: usize) -> EmbeddingVector {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(match kind {
        EmbedKind::Image => b"image",
        EmbedKind::Text => b"text!",
    });
    hasher.update(bytes);
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    loop {
        let values: Vec<f32> = (0..dims)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        if let Ok(v) = EmbeddingVector::normalized_from(values) {
            return v;
        }
    }
}

#[async_trait]
impl Embedder for HashEmbedder {
    fn kind(&self) -> EmbedKind {
        self.kind
    }

    fn dims(&self) -> usize {
        self.dims
    }

    async fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        check_kind(self.kind, inputs)?;
        Ok(inputs.iter().map(|i| self.vector_for(i.bytes())).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    inputs: Vec<String>,
    kind: &'a EmbedKind,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dims: usize,
}

/// Client for an external embedding service.
///
/// Wire format: `POST {"inputs": [...], "kind": "image"|"text"}` where image
/// inputs are base64, answered by `{"vectors": [[...]], "dims": N}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    url: String,
    kind: EmbedKind,
    dims: usize,
    client: reqwest::Client,
    retry: RetryPolicy,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, kind: EmbedKind, dims: usize, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client builds");
        Self {
            url: url.into(),
            kind,
            dims,
            client,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    async fn attempt(&self, body: &EmbedRequest<'_>) -> Result<EmbedResponse, (bool, EmbedderError)> {
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .await
            .map_err(|e| (true, EmbedderError::Unavailable(e.to_string())))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, EmbedderError::Unavailable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            return Err((false, EmbedderError::Unavailable(format!("HTTP {status}"))));
        }
        resp.json::<EmbedResponse>()
            .await
            .map_err(|e| (false, EmbedderError::Malformed(e.to_string())))
    }
}

#[async_trait]
impl Embedder for HttpEmbedder {
    fn kind(&self) -> EmbedKind {
        self.kind
    }

    fn dims(&self) -> usize {
        self.dims
    }

    async fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        check_kind(self.kind, inputs)?;
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = EmbedRequest {
            inputs: inputs
                .iter()
                .map(|i| match i {
                    EmbedInput::Image(bytes) => b64.encode(bytes),
                    EmbedInput::Text(t) => t.clone(),
                })
                .collect(),
            kind: &self.kind,
        };
        let (result, _) = self.retry.run(|_| self.attempt(&body), |(retry, _)| *retry).await;
        let reply = result.map_err(|(_, e)| e)?;
        if reply.vectors.len() != inputs.len() {
            return Err(EmbedderError::Malformed(format!(
                "expected {} vectors, got {}",
                inputs.len(),
                reply.vectors.len()
            )));
        }
        if reply.dims != self.dims {
            return Err(EmbedderError::Malformed(format!(
                "expected {} dims, service reports {}",
                self.dims, reply.dims
            )));
        }
        reply
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dims {
                    return Err(EmbedderError::Malformed(format!("vector of length {}", v.len())));
                }
                Ok(EmbeddingVector::normalized_from(v)?)
            })
            .collect()
    }
}

/// The pair of backends used for image and caption embeddings.
#[derive(Clone)]
pub struct Embedders {
    pub image: Arc<dyn Embedder>,
    pub text: Arc<dyn Embedder>,
}

impl Embedders {
    pub fn new(image: Arc<dyn Embedder>, text: Arc<dyn Embedder>) -> Self {
        Self { image, text }
    }

    /// Offline hash embedders of the given width.
    pub fn hashed(dims: usize) -> Self {
        Self {
            image: Arc::new(HashEmbedder::image(dims)),
            text: Arc::new(HashEmbedder::text(dims)),
        }
    }
}

/// Populates both embeddings of a precedent, loading the image bytes from
/// its locator.
pub async fn embed_precedent(
    p: Precedent,
    image: &dyn Embedder,
    text: &dyn Embedder,
) -> Result<Precedent, EmbedderError> {
    let loaded = LoadedImage::resolve(&p.image).await?;
    embed_precedent_with_bytes(p, &loaded, image, text).await
}

pub async fn embed_precedent_with_bytes(
    mut p: Precedent,
    loaded: &LoadedImage,
    image: &dyn Embedder,
    text: &dyn Embedder,
) -> Result<Precedent, EmbedderError> {
    if p.caption.trim().is_empty() {
        return Err(EmbedderError::EmptyCaption);
    }
    let img = image.embed_one(EmbedInput::Image(loaded.bytes.clone())).await?;
    let txt = text.embed_one(EmbedInput::Text(p.caption.clone())).await?;
    p.image_embedding = Some(img.into_normalized()?);
    p.caption_embedding = Some(txt.into_normalized()?);
    Ok(p)
}
