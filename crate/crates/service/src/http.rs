//! JSON API over a run store. Every mutation goes through [`RunService`],
//! the same path the CLI uses.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;
use streetlens_core::chat::media_type;
use streetlens_core::pipeline::{ModuleId, PipelineError, RunConfig, RunService};
use streetlens_core::prompt::PromptBundle;

#[derive(Clone)]
pub struct AppState {
    pub service: RunService,
    /// Relative paths in posted configs resolve against this directory.
    pub base_dir: PathBuf,
}

pub struct ApiError(pub PipelineError);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        Self(e)
    }
}

pub fn status_for(e: &PipelineError) -> StatusCode {
    match e {
        PipelineError::InvalidConfig(_) | PipelineError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
        PipelineError::RunNotFound(_) | PipelineError::NotFound(_) => StatusCode::NOT_FOUND,
        PipelineError::DuplicateRun(_) | PipelineError::DependencyNotMet { .. } | PipelineError::RunBusy(_) => {
            StatusCode::CONFLICT
        }
        PipelineError::ModuleFailed { .. } | PipelineError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.0.code(), "message": self.0.to_string()}});
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError(PipelineError::InvalidRequest(format!("request body: {e}"))))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/modules/{action}", post(execute_module))
        .route("/runs/{id}/segments", get(segments))
        .route("/runs/{id}/assessments", get(assessments))
        .route("/runs/{id}/reliability", get(reliability))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/prompts", get(get_prompts).put(put_prompts))
        .route("/runs/{id}/images/{image_id}", get(image))
        .with_state(state)
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<Response> {
    Ok(Json(s.service.list_runs()?).into_response())
}

async fn create_run(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let config: RunConfig = parse_body(&body)?;
    let state = s.service.create_run(config, Some(&s.base_dir))?;
    Ok((StatusCode::CREATED, Json(state)).into_response())
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.service.detail(&id)?).into_response())
}

/// `POST /runs/{id}/modules/{m}:execute`. Dependency and lock checks happen
/// before responding. By default the module then runs in the background and
/// the response is 202 with the `running` state; `?wait=true` blocks until
/// the module finishes.
async fn execute_module(
    State(s): State<AppState>,
    Path((id, action)): Path<(String, String)>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let module = action
        .strip_suffix(":execute")
        .ok_or_else(|| PipelineError::NotFound(format!("action {action}")))?
        .parse::<ModuleId>()
        .map_err(PipelineError::InvalidRequest)?;
    let job = s.service.begin(&id, module)?;
    if query.get("wait").is_some_and(|w| w == "true" || w == "1") {
        return Ok(Json(job.run().await?).into_response());
    }
    let accepted = job.state().clone();
    tokio::spawn(async move {
        if let Err(e) = job.run().await {
            tracing::warn!(error = %e, "background module execution failed");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(accepted)).into_response())
}

async fn segments(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.service.segments(&id)?).into_response())
}

async fn assessments(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let item = query.get("item").map(String::as_str);
    Ok(Json(s.service.assessments(&id, item)?).into_response())
}

async fn reliability(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.service.reliability(&id)?).into_response())
}

async fn report(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let (markdown, report) = s.service.report(&id, false)?;
    Ok(Json(json!({"markdown": markdown, "report": report})).into_response())
}

async fn get_prompts(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.service.prompts(&id)?).into_response())
}

async fn put_prompts(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let bundle: PromptBundle = parse_body(&body)?;
    Ok(Json(s.service.update_prompts(&id, bundle)?).into_response())
}

async fn image(State(s): State<AppState>, Path((id, image_id)): Path<(String, String)>) -> ApiResult<Response> {
    let bytes = s.service.image(&id, &image_id)?;
    Ok(([(header::CONTENT_TYPE, media_type(&bytes))], bytes).into_response())
}

/// Binds `addr` and serves until the process is interrupted.
pub async fn serve(state: AppState, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
            anyhow::bail!("AddressInUse: {addr} is already in use")
        }
        Err(e) => return Err(e.into()),
    };
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
