//! HTTP front end over the judge, the collector and the precedent store.

mod config;

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::collector::{CollectionOutcome, Collector, CollectorConfig, DiscardReason, LabeledExample};
use crate::embedding::Embedders;
use crate::gateway::BackendHandle;
use crate::image::LoadedImage;
use crate::judge::{Judge, JudgeError};
use crate::policy::PolicyCatalog;
use crate::retrieval::RetrievalConfig;
use crate::store::{Precedent, PrecedentDb, PrecedentFilter, PrecedentId, Provenance, PvLabel};

pub use config::{BackendConfig, ConfigError, EmbedderConfig, ServiceConfig, ENV_PREFIX};

pub const MAX_PAGE: usize = 1000;
pub const DEFAULT_PAGE: usize = 100;

#[derive(Clone)]
pub struct AppState {
    pub judge: Judge,
    pub collector: Collector,
    pub db: Arc<PrecedentDb>,
}

impl AppState {
    pub fn new(
        backend: BackendHandle,
        embedders: Embedders,
        catalog: Arc<PolicyCatalog>,
        retrieval: RetrievalConfig,
        db: Arc<PrecedentDb>,
    ) -> Self {
        let judge = Judge::new(backend.clone(), embedders.clone(), catalog.clone(), retrieval);
        let collector = Collector::new(backend, catalog).with_embedders(embedders);
        Self { judge, collector, db }
    }

    /// Opens the database (taking its writer lock) and builds the backend
    /// and embedders described by `cfg`.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let catalog = Arc::new(cfg.catalog()?);
        let backend = cfg.backend.build()?;
        let embedders = cfg.embedders.build()?;
        let db = Arc::new(PrecedentDb::open(&cfg.db_path)?);
        let mut state = Self::new(backend, embedders, catalog, cfg.retrieval, db);
        state.judge = state.judge.with_model_id(cfg.backend.model_id.clone());
        state.collector = state.collector.with_config(CollectorConfig {
            model_id: cfg.backend.model_id.clone(),
            critique_revise: true,
        });
        Ok(state)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/judge", post(judge))
        .route("/v1/precedents/collect", post(collect))
        .route("/v1/precedents", get(list_precedents))
        .with_state(state)
}

/// Binds `cfg.listen_addr` and serves until the process exits.
pub async fn serve(cfg: &ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::from_config(cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.listen_addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: cfg.listen_addr.clone(),
            source,
        })?;
    tracing::info!(addr = %cfg.listen_addr, precedents = state.db.len(), "serving");
    axum::serve(listener, router(state)).await.map_err(ServiceError::Serve)
}

struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    detail: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            detail: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.kind, "message": self.message});
        if let Some(d) = self.detail {
            body["outcome"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<JudgeError> for ApiError {
    fn from(e: JudgeError) -> Self {
        let (status, kind) = match &e {
            JudgeError::Backend(_) => (StatusCode::BAD_GATEWAY, "BackendUnavailable"),
            JudgeError::UnparseableVerdict { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "UnparseableVerdict"),
            JudgeError::EmbedderUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "EmbedderUnavailable"),
            JudgeError::Image(_) => (StatusCode::BAD_REQUEST, "BadImage"),
            JudgeError::Retrieval(_) => (StatusCode::INTERNAL_SERVER_ERROR, "RetrievalFailure"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

async fn healthz(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "precedents": s.db.len()}))
}

#[derive(Debug, Default, Deserialize)]
pub struct JudgeRequest {
    pub image_b64: Option<String>,
    pub image_url: Option<String>,
}

async fn judge(
    State(s): State<AppState>,
    body: Result<Json<JudgeRequest>, JsonRejection>,
) -> Result<Json<crate::judge::Verdict>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadImage", e.body_text()))?;
    let image = match (req.image_b64, req.image_url) {
        (Some(b64), None) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadImage", format!("invalid base64: {e}")))?;
            if bytes.is_empty() {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "BadImage", "image is empty"));
            }
            LoadedImage::from_upload(bytes)
        }
        (None, Some(url)) => LoadedImage::load(&url)
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadImage", e.to_string()))?,
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "BadImage",
                "give exactly one of image_b64 and image_url",
            ))
        }
    };
    Ok(Json(s.judge.judge_image(&image, &s.db).await?))
}

#[derive(Debug, Deserialize)]
pub struct CollectRequest {
    pub image: String,
    pub label: PvLabel,
    pub policy_id: String,
}

async fn collect(
    State(s): State<AppState>,
    body: Result<Json<CollectRequest>, JsonRejection>,
) -> Result<Json<CollectionOutcome>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text()))?;
    let policy_id = crate::policy::normalize_id(&req.policy_id);
    if !s.collector.catalog().contains(&policy_id) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownPolicy",
            format!("unknown policy `{}`", req.policy_id),
        ));
    }
    let example = LabeledExample::new(req.image, req.label, policy_id);
    let outcome = s
        .collector
        .collect_one(&example, &s.db)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure", e.to_string()))?;
    let failure = match &outcome.discard_reason {
        Some(DiscardReason::Backend(m)) => Some((StatusCode::BAD_GATEWAY, "BackendUnavailable", m.clone())),
        Some(DiscardReason::ImageUnreadable(m)) => Some((StatusCode::BAD_REQUEST, "BadImage", m.clone())),
        Some(DiscardReason::Embedder(m)) => Some((StatusCode::SERVICE_UNAVAILABLE, "EmbedderUnavailable", m.clone())),
        _ => None,
    };
    if let Some((status, kind, message)) = failure {
        let mut err = ApiError::new(status, kind, message);
        err.detail = serde_json::to_value(&outcome).ok();
        return Err(err);
    }
    Ok(Json(outcome))
}

#[derive(Debug, Default, Deserialize)]
pub struct PageQuery {
    pub policy: Option<String>,
    pub provenance: Option<String>,
    pub label: Option<String>,
    pub limit: Option<String>,
    pub cursor: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<Precedent>,
    pub next_cursor: Option<PrecedentId>,
}

impl PageQuery {
    /// Validates the query against `catalog`.
    pub fn parse(&self, catalog: &PolicyCatalog) -> Result<(PrecedentFilter, Option<PrecedentId>, usize), String> {
        let mut filter = PrecedentFilter::default();
        if let Some(p) = self.policy.as_deref().filter(|p| !p.is_empty()) {
            let id = crate::policy::normalize_id(p);
            if !catalog.contains(&id) {
                return Err(format!("unknown policy `{p}`"));
            }
            filter.policy_id = Some(id);
        }
        if let Some(p) = self.provenance.as_deref().filter(|p| !p.is_empty()) {
            filter.provenance = Some(Provenance::parse(p).ok_or_else(|| format!("unknown provenance `{p}`"))?);
        }
        if let Some(l) = self.label.as_deref().filter(|l| !l.is_empty()) {
            filter.label = Some(PvLabel::parse(l).ok_or_else(|| format!("unknown label `{l}`"))?);
        }
        let limit = match self.limit.as_deref() {
            None | Some("") => DEFAULT_PAGE,
            Some(l) => l.parse().map_err(|_| format!("limit `{l}` is not a number"))?,
        };
        if limit == 0 || limit > MAX_PAGE {
            return Err(format!("limit must be in 1..={MAX_PAGE}"));
        }
        let cursor = match self.cursor.as_deref() {
            None | Some("") => None,
            Some(c) => Some(c.parse().map_err(|_| format!("bad cursor `{c}`"))?),
        };
        Ok((filter, cursor, limit))
    }
}

async fn list_precedents(
    State(s): State<AppState>,
    query: Result<Query<PageQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Page>, ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "BadFilter", m);
    let Query(q) = query.map_err(|e| bad(e.body_text()))?;
    let (filter, cursor, limit) = q.parse(s.collector.catalog()).map_err(bad)?;
    let (items, next_cursor) = s.db.page(&filter, cursor, limit);
    Ok(Json(Page { items, next_cursor }))
}
