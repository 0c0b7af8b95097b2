//! HTTP prompting service.
//!
//! Inference runs on the blocking pool. Sessions live behind one mutex, so
//! prompts are answered one at a time; each session keeps its own
//! embedding cache.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use octseg::checkpoint::{load_checkpoint, load_lora};
use octseg::data::load_volume;
use octseg::serving::{PromptRequest, PromptResponse, SessionStore};
use octseg::{Error, LoraState, SegmentationModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{raster, CliError};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Validation(_) | Error::EmptyClass { .. } | Error::Json(_) | Error::Config(_) | Error::Format { .. } => {
                StatusCode::BAD_REQUEST
            }
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let kind = match (&e, status) {
            (Error::Io(_), StatusCode::NOT_FOUND) => "not_found",
            _ => e.kind(),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<image::ImageError> for ApiError {
    fn from(e: image::ImageError) -> Self {
        Self::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.kind, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub volume_path: PathBuf,
    pub checkpoint: PathBuf,
    /// Adapter archive applied on top of the checkpoint.
    #[serde(default)]
    pub lora: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub volume_id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub model_version: String,
}

type Loaded = (Arc<SegmentationModel>, Option<Arc<LoraState>>);

pub struct AppState {
    store: Mutex<SessionStore>,
    /// Checkpoints already read, keyed by (checkpoint, adapters) path.
    models: Mutex<HashMap<(PathBuf, Option<PathBuf>), Loaded>>,
}

impl AppState {
    pub fn new(cache_size: usize) -> octseg::Result<Self> {
        Ok(Self {
            store: Mutex::new(SessionStore::new(cache_size)?),
            models: Mutex::new(HashMap::new()),
        })
    }

    fn model(&self, req: &CreateSession) -> Result<Loaded, ApiError> {
        let key = (req.checkpoint.clone(), req.lora.clone());
        if let Some(hit) = lock(&self.models)?.get(&key) {
            return Ok(hit.clone());
        }
        let loaded = load_checkpoint(&req.checkpoint)?;
        let lora = match &req.lora {
            Some(p) => Some(load_lora(p, &loaded.model.config)?),
            None => loaded.lora,
        };
        let entry = (Arc::new(loaded.model), lora.map(Arc::new));
        lock(&self.models)?.insert(key, entry.clone());
        Ok(entry)
    }

    fn create(&self, req: CreateSession) -> Result<SessionCreated, ApiError> {
        let (model, lora) = self.model(&req)?;
        let volume = load_volume(&req.volume_path)?;
        let (volume_id, shape) = (volume.volume_id.clone(), volume.shape);
        let checkpoint = req.checkpoint.display().to_string();
        let mut store = lock(&self.store)?;
        let session_id = store.open(volume, checkpoint, model, lora)?;
        let model_version = store.get(&session_id)?.model_version().to_string();
        Ok(SessionCreated {
            session_id,
            volume_id,
            depth: shape.depth,
            height: shape.height,
            width: shape.width,
            model_version,
        })
    }

    fn slice_png(&self, id: &str, k: usize) -> Result<Vec<u8>, ApiError> {
        let store = lock(&self.store)?;
        let session = store.get(id)?;
        let side = session.model().config.input_size;
        let pixels = session.slice_u8(k)?;
        Ok(raster::encode_png(&pixels, side, side)?)
    }

    fn prompt(&self, id: &str, req: PromptRequest) -> Result<PromptResponse, ApiError> {
        if req.session_id.as_deref().is_some_and(|s| s != id) {
            return Err(Error::Validation("session_id in the body differs from the path".into()).into());
        }
        Ok(lock(&self.store)?.get_mut(id)?.handle_prompt(&req)?)
    }

    fn close(&self, id: &str) -> Result<(), ApiError> {
        Ok(lock(&self.store)?.close(id)?)
    }
}

fn lock<T>(m: &Mutex<T>) -> Result<MutexGuard<'_, T>, ApiError> {
    m.lock().map_err(|_| ApiError::internal("state lock poisoned"))
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "json", e.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionCreated>, ApiError> {
    let req: CreateSession = parse_json(&body)?;
    blocking(move || state.create(req)).await.map(Json)
}

async fn get_slice(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let k: usize = k
        .parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "validation", format!("bad slice index `{k}`")))?;
    let png = blocking(move || state.slice_png(&id, k)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn prompt(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<PromptResponse>, ApiError> {
    let req: PromptRequest = parse_json(&body)?;
    blocking(move || state.prompt(&id, req)).await.map(Json)
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.close(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn no_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/slices/{k}", get(get_slice))
        .route("/sessions/{id}/prompt", post(prompt))
        .fallback(no_route)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, cache_size: usize) -> Result<(), CliError> {
    let state = Arc::new(AppState::new(cache_size)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
