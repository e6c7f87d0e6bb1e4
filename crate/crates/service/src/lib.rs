//! HTTP API for interactive annotation sessions.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | POST | `/sessions` | raw PNG/JPEG bytes | 201 `{session_id, height, width}` |
//! | POST | `/sessions/{id}/clicks` | `{x, y, polarity}` | 200 session view |
//! | POST | `/sessions/{id}/select` | `{proposal_index}` | 200 session view |
//! | POST | `/sessions/{id}/undo` | — | 200 session view |
//! | GET | `/sessions/{id}` | — | 200 session view |
//! | GET | `/sessions/{id}/mask.png` | — | 1-bit grayscale PNG of the selected mask |
//! | GET | `/health` | — | 200 `{status, sessions}` |
//!
//! Errors are JSON `{"error": "..."}`: 404 unknown session, 409 when there
//! is nothing to select/undo/download yet, 413 oversized upload, 415
//! undecodable image, 422 out-of-range click or proposal index.
//!
//! Masks travel as [`RleMask`]: row-major runs starting with background.
//! Requests on one session are serialized; inference runs on blocking
//! threads, at most `max_concurrent_inference` at a time.

pub mod session;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use piclick_core::model::ProposalModel;
use piclick_core::{MaskGrid, Polarity};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Semaphore};

pub use session::{Event, ProposalView, RleMask, Session, SessionError, SessionView};

pub type SharedModel = Arc<dyn ProposalModel<f32> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    /// Longest accepted image side, in pixels.
    pub max_side: u32,
    pub max_concurrent_inference: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 16 << 20,
            max_side: 1024,
            max_concurrent_inference: 1,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::OutOfBounds { .. } | SessionError::BadIndex { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::NoProposals | SessionError::EmptyHistory => StatusCode::CONFLICT,
            SessionError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    model: SharedModel,
    config: ServiceConfig,
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Session>>>>>,
    inference: Arc<Semaphore>,
}

impl AppState {
    pub fn new(model: SharedModel, config: ServiceConfig) -> Self {
        let permits = config.max_concurrent_inference.max(1);
        Self {
            model,
            config,
            sessions: Arc::default(),
            inference: Arc::new(Semaphore::new(permits)),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
    }

    /// Copy of a session's full state, including probabilities.
    pub async fn snapshot(&self, id: &str) -> Option<Session> {
        let s = self.session(id).ok()?;
        let guard = s.lock().await;
        Some(guard.clone())
    }

    async fn mutate<F>(&self, id: &str, f: F) -> Result<Json<SessionView>, ApiError>
    where
        F: FnOnce(&mut Session, &(dyn ProposalModel<f32> + Send + Sync)) -> Result<(), SessionError> + Send + 'static,
    {
        let session = self.session(id)?;
        let mut guard = session.lock_owned().await;
        let permit = self
            .inference
            .clone()
            .acquire_owned()
            .await
            .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
        let model = self.model.clone();
        tokio::task::spawn_blocking(move || {
            let _permit = permit;
            f(&mut guard, &*model)?;
            Ok(Json(guard.view()))
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")))?
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/mask.png", get(mask_png))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub x: i64,
    pub y: i64,
    pub polarity: Polarity,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectRequest {
    pub proposal_index: usize,
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let n = state.sessions.read().expect("session map poisoned").len();
    Json(serde_json::json!({ "status": "ok", "sessions": n }))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Created>), ApiError> {
    if body.len() > state.config.max_upload_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "image too large"));
    }
    let img = image::load_from_memory(&body)
        .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("cannot decode image: {e}")))?;
    let max = state.config.max_side;
    if img.width() > max || img.height() > max {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {}×{}, limit is {max} per side", img.width(), img.height()),
        ));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "image has no pixels"));
    }
    let tensor = piclick_data::rgb_to_tensor(&img.to_rgb8());
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::new(id.clone(), tensor);
    let created = Created {
        session_id: id.clone(),
        height: session.height(),
        width: session.width(),
    };
    state
        .sessions
        .write()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let s = state.session(&id)?;
    let guard = s.lock().await;
    Ok(Json(guard.view()))
}

async fn add_click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<SessionView>, ApiError> {
    // Negative coordinates get the same 422 as ones past the far edge.
    let coord = |v: i64| usize::try_from(v).unwrap_or(usize::MAX);
    let (x, y) = (coord(req.x), coord(req.y));
    state
        .mutate(&id, move |s, model| s.click(model, x, y, req.polarity))
        .await
}

async fn select(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SelectRequest>,
) -> Result<Json<SessionView>, ApiError> {
    state.mutate(&id, move |s, _| s.select(req.proposal_index)).await
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    state.mutate(&id, |s, model| s.undo(model)).await
}

async fn mask_png(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = state.session(&id)?;
    let mask = s
        .lock()
        .await
        .selected_mask()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no mask selected yet"))?;
    let bytes = encode_1bit_png(&mask).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Inside pixels are white.
pub fn encode_1bit_png(mask: &MaskGrid) -> Result<Vec<u8>, png::EncodingError> {
    let (w, h) = (mask.width(), mask.height());
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&packed)?;
    writer.finish()?;
    Ok(out)
}
