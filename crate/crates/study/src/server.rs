//! HTTP JSON API over a batch and a response store.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/trial?session=S` | next unanswered trial, or `{"complete": true, "answered": n}` |
//! | POST | `/api/response` | `{trial_id, session, choice, response_time_ms}`; 409 on duplicate, 404 on unknown trial |
//! | GET | `/api/report` | aggregated result |
//! | GET | `/images/{trial_id}/{left\|right}` | PNG resized to the display size |

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::batch::StudyBatch;
use crate::error::{Result, StudyError};
use crate::stats::aggregate;
use crate::store::{Choice, Response, ResponseStore};

/// Height and width at which both images of a pair are shown.
pub const DISPLAY_SIZE: (u32, u32) = (200, 400);

pub struct StudyState {
    pub batch: StudyBatch,
    pub store: ResponseStore,
    pub exclusion_threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub trial_id: String,
    pub left_url: String,
    pub right_url: String,
    pub display_ms: Option<u32>,
    pub index: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub complete: bool,
    pub answered: usize,
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    session: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    trial_id: String,
    session: String,
    choice: Choice,
    response_time_ms: u64,
    #[serde(default)]
    timestamp: Option<u64>,
}

struct ApiError(StudyError);

impl IntoResponse for ApiError {
    fn into_response(self) -> HttpResponse {
        let status = match &self.0 {
            StudyError::Conflict { .. } => StatusCode::CONFLICT,
            StudyError::NotFound(_) => StatusCode::NOT_FOUND,
            StudyError::Invalid(_) => StatusCode::BAD_REQUEST,
            StudyError::EmptyResult => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        ApiError(e)
    }
}

fn session_of(q: SessionQuery) -> std::result::Result<String, ApiError> {
    match q.session {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(ApiError(StudyError::Invalid("missing session parameter".into()))),
    }
}

async fn next_trial(
    State(state): State<Arc<StudyState>>,
    Query(q): Query<SessionQuery>,
) -> std::result::Result<HttpResponse, ApiError> {
    let session = session_of(q)?;
    let answered = state.store.answered(&session);
    let total = state.batch.trials.len();
    match state
        .batch
        .trials
        .iter()
        .enumerate()
        .find(|(_, t)| !answered.contains(&t.trial_id))
    {
        Some((index, t)) => Ok(Json(TrialView {
            trial_id: t.trial_id.clone(),
            left_url: format!("/images/{}/left", t.trial_id),
            right_url: format!("/images/{}/right", t.trial_id),
            display_ms: t.display_ms,
            index,
            total,
        })
        .into_response()),
        None => Ok(Json(Completion {
            complete: true,
            answered: answered.len(),
        })
        .into_response()),
    }
}

async fn submit(
    State(state): State<Arc<StudyState>>,
    Json(s): Json<Submission>,
) -> std::result::Result<HttpResponse, ApiError> {
    let timestamp = s.timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    });
    state.store.record(
        &state.batch,
        Response {
            trial_id: s.trial_id,
            session: s.session,
            choice: s.choice,
            response_time_ms: s.response_time_ms,
            timestamp,
        },
    )?;
    Ok(Json(serde_json::json!({ "accepted": true })).into_response())
}

async fn report(State(state): State<Arc<StudyState>>) -> std::result::Result<HttpResponse, ApiError> {
    let result = aggregate(&state.batch, &state.store.snapshot(), state.exclusion_threshold)?;
    Ok(Json(result).into_response())
}

/// Reads an image and resizes it to [`DISPLAY_SIZE`], encoded as PNG.
pub fn display_png(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| StudyError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (h, w) = DISPLAY_SIZE;
    let resized = image::imageops::resize(&img.to_rgb8(), w, h, image::imageops::FilterType::Triangle);
    let mut out = Cursor::new(Vec::new());
    resized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| StudyError::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(out.into_inner())
}

async fn image_handler(
    State(state): State<Arc<StudyState>>,
    UrlPath((trial_id, side)): UrlPath<(String, String)>,
) -> std::result::Result<HttpResponse, ApiError> {
    let trial = state
        .batch
        .trial(&trial_id)
        .ok_or_else(|| StudyError::NotFound(format!("trial {trial_id}")))?;
    let path = match side.as_str() {
        "left" => trial.left_image(),
        "right" => trial.right_image(),
        _ => return Err(StudyError::NotFound(format!("side {side}")).into()),
    };
    let bytes = display_png(path)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(state: Arc<StudyState>) -> Router {
    Router::new()
        .route("/api/trial", get(next_trial))
        .route("/api/response", post(submit))
        .route("/api/report", get(report))
        .route("/images/{trial_id}/{side}", get(image_handler))
        .with_state(state)
}

/// Binds `addr` and serves until the future is dropped. Port 0 picks a free port;
/// the bound address is reported through `on_bound`.
pub async fn serve_study(state: Arc<StudyState>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> Result<()> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|e| StudyError::io(addr.to_string(), e))?;
    let local = listener.local_addr().map_err(|e| StudyError::io(addr.to_string(), e))?;
    on_bound(local);
    axum::serve(listener, router(state))
        .await
        .map_err(|e| StudyError::io(local.to_string(), e))
}
