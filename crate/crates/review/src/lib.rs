//! HTTP JSON API over a review store.
//!
//! ```text
//! GET  /api/queue              pending items (blind views by default)
//! GET  /api/items/{id}/image   the item's ROI crop
//! POST /api/items/{id}/label   {label, reviewer, revision} -> decision
//! GET  /api/report             base vs ensemble snapshot
//! ```
//!
//! Errors are `{"code": ..., "message": ...}` with a matching status.
//! Store access is file based and runs on the blocking pool.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use tonguescreen_core::triage::{EnsembleDecision, ReviewItemView, ReviewReport, ReviewStore};
use tonguescreen_core::Error;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub store: PathBuf,
    /// Directory that item image paths are relative to (the run directory).
    pub image_root: PathBuf,
    pub blind_mode: bool,
    /// Shared secret expected as `Authorization: Bearer <token>`.
    pub token: Option<String>,
    /// Static UI bundle served at `/` when set.
    pub ui_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(store: impl Into<PathBuf>, image_root: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store: store.into(),
            image_root: image_root.into(),
            blind_mode: true,
            token: None,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ApiErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ApiErrorBody { code: code.into(), message: message.into() } }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            Error::RevisionConflict { .. } => (StatusCode::CONFLICT, "revision_conflict"),
            Error::AlreadyLabeled(_) => (StatusCode::CONFLICT, "already_labeled"),
            Error::InvalidLabel { .. } | Error::UnknownClass(_) | Error::ClassNotInTask { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_label")
            }
            Error::Store(_) | Error::Io(_) | Error::Json(_) => (StatusCode::INTERNAL_SERVER_ERROR, "store_unreadable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct AppState {
    store: PathBuf,
    image_root: PathBuf,
    blind: bool,
    token: Option<String>,
}

impl AppState {
    /// Runs a store operation on the blocking pool.
    async fn with_store<T: Send + 'static>(
        self: &Arc<Self>,
        f: impl FnOnce(ReviewStore) -> tonguescreen_core::Result<T> + Send + 'static,
    ) -> ApiResult<T> {
        let path = self.store.clone();
        tokio::task::spawn_blocking(move || f(ReviewStore::open(&path)?))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
            .map_err(ApiError::from)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRequest {
    pub label: String,
    #[serde(default)]
    pub reviewer: String,
    pub revision: u64,
}

pub fn router(config: &ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        store: config.store.clone(),
        image_root: config.image_root.clone(),
        blind: config.blind_mode,
        token: config.token.clone(),
    });
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items/{id}/image", get(image))
        .route("/api/items/{id}/label", post(label))
        .route("/api/report", get(report))
        .route_layer(middleware::from_fn_with_state(state.clone(), authorize))
        .with_state(state);
    match &config.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("review service on http://{}", listener.local_addr()?);
    axum::serve(listener, router(&config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn authorize(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn queue(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<ReviewItemView>>> {
    let blind = state.blind;
    let views = state
        .with_store(move |store| Ok(store.state()?.pending().iter().map(|i| i.view(blind)).collect()))
        .await?;
    Ok(Json(views))
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let rel = state.with_store(move |store| Ok(store.state()?.get(&id)?.image_path.clone())).await?;
    let path = contained(&state.image_root, &rel)
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "bad_image_path", format!("image path '{rel}' escapes the run directory")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "image_missing", format!("{}: {e}", path.display())))?;
    let mut resp = Response::new(Body::from(bytes));
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&path)));
    Ok(resp)
}

async fn label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<Json<EnsembleDecision>> {
    let Json(req) = body.map_err(|e| ApiError::new(e.status(), "malformed_body", e.body_text()))?;
    let blind = state.blind;
    let decision = state
        .with_store(move |store| store.submit_label(&id, &req.label, &req.reviewer, req.revision, blind))
        .await?;
    Ok(Json(decision))
}

/// The snapshot; a store without an evaluation reports `loaded: false`.
async fn report(State(state): State<Arc<AppState>>) -> ApiResult<Json<ReviewReport>> {
    Ok(Json(state.with_store(|store| Ok(store.state()?.report())).await?))
}

fn contained(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    rel.components().all(|c| matches!(c, Component::Normal(_))).then(|| root.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_stay_inside_the_root() {
        let root = Path::new("/run");
        assert_eq!(contained(root, "images/a_roi.png"), Some(PathBuf::from("/run/images/a_roi.png")));
        assert!(contained(root, "../etc/passwd").is_none());
        assert!(contained(root, "/etc/passwd").is_none());
    }

    #[test]
    fn content_types() {
        assert_eq!(content_type(Path::new("a.PNG")), "image/png");
        assert_eq!(content_type(Path::new("a.jpeg")), "image/jpeg");
        assert_eq!(content_type(Path::new("a")), "application/octet-stream");
    }

    #[test]
    fn error_statuses() {
        let s = |e: Error| ApiError::from(e).status;
        assert_eq!(s(Error::UnknownItem("x".into())), StatusCode::NOT_FOUND);
        assert_eq!(s(Error::AlreadyLabeled("x".into())), StatusCode::CONFLICT);
        assert_eq!(s(Error::RevisionConflict { id: "x".into(), expected: 0, found: 1 }), StatusCode::CONFLICT);
        assert_eq!(s(Error::InvalidLabel { label: "XX".into(), allowed: "..".into() }), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(s(Error::Store("gone".into())), StatusCode::INTERNAL_SERVER_ERROR);
    }
}
