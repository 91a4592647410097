//! HTTP front end and worker threads.

use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use super::config::ToolkitConfig;
use super::jobs::{execute, JobKind, JobRequest, RunContext, SchemaViolation};
use super::store::{ArtifactError, JobService, SubmitError};
use crate::attention::site::{AttentionSite, AttnKind};
use crate::backend::adapter::{BackboneId, ModelAdapter};
use crate::error::Result;

/// JSON schema of the job submission documents.
pub const REQUEST_SCHEMA: &str = include_str!("schema.json");

#[derive(Clone)]
pub struct AppState {
    pub jobs: Arc<JobService>,
    pub sites: Arc<Vec<AttentionSite>>,
    pub backbone: String,
}

impl AppState {
    pub fn new(jobs: Arc<JobService>, adapter: &ModelAdapter) -> Self {
        Self::for_backbone(jobs, adapter.backbone_id())
    }

    /// State for a backbone's site table; needs no loaded weights.
    pub fn for_backbone(jobs: Arc<JobService>, backbone: BackboneId) -> Self {
        Self {
            jobs,
            sites: Arc::new(backbone.site_table()),
            backbone: backbone.as_str().to_string(),
        }
    }

    fn self_site_count(&self) -> usize {
        self.sites.iter().filter(|s| s.kind == AttnKind::SelfAttn).count()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/jobs", post(submit_job))
        .route("/sweeps", post(submit_sweep))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/artifacts/{*name}", get(job_artifact))
        .route("/sites", get(list_sites))
        .route("/schema", get(schema))
        .route("/health", get(health))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>, pointer: Option<String>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(p) = pointer {
        body["pointer"] = json!(p);
    }
    (status, Json(body)).into_response()
}

fn violation(v: SchemaViolation) -> Response {
    error(StatusCode::BAD_REQUEST, v.message, Some(v.pointer))
}

fn header_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

fn enqueue(state: &AppState, request: JobRequest, key: Option<String>, pointer: &str) -> Response {
    if let Err(v) = request.check(state.self_site_count(), pointer) {
        return violation(v);
    }
    match state.jobs.submit(request, key) {
        Ok((id, existed)) => {
            let status = if existed { StatusCode::OK } else { StatusCode::ACCEPTED };
            let record = state.jobs.get(&id);
            let job_status = record.map(|r| r.status);
            (status, Json(json!({ "id": id, "status": job_status }))).into_response()
        }
        Err(SubmitError::QueueFull { capacity }) => error(
            StatusCode::SERVICE_UNAVAILABLE,
            format!("job queue is full ({capacity} waiting)"),
            None,
        ),
        Err(SubmitError::KeyConflict { existing }) => error(
            StatusCode::CONFLICT,
            format!("idempotency key already used by {existing} with a different request"),
            None,
        ),
        Err(SubmitError::Storage(msg)) => error(StatusCode::INTERNAL_SERVER_ERROR, msg, None),
    }
}

fn parse_body(body: &Bytes) -> Result<Value, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("body is not JSON: {e}"), Some(String::new())))
}

async fn submit_job(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let doc = match parse_body(&body) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let Some(obj) = doc.as_object() else {
        return error(StatusCode::BAD_REQUEST, "body must be an object", Some(String::new()));
    };
    if let Some(extra) = obj.keys().find(|k| !matches!(k.as_str(), "kind" | "request" | "idempotency_key")) {
        return error(
            StatusCode::BAD_REQUEST,
            format!("unknown field `{extra}`"),
            Some(format!("/{extra}")),
        );
    }
    let kind = match obj.get("kind").and_then(Value::as_str).map(str::parse::<JobKind>) {
        Some(Ok(k)) => k,
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, e.to_string(), Some("/kind".into())),
        None => return error(StatusCode::BAD_REQUEST, "missing string field `kind`", Some("/kind".into())),
    };
    let Some(request) = obj.get("request") else {
        return error(StatusCode::BAD_REQUEST, "missing field `request`", Some("/request".into()));
    };
    let key = match obj.get("idempotency_key") {
        None | Some(Value::Null) => header_key(&headers),
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return error(
                StatusCode::BAD_REQUEST,
                "idempotency_key must be a string",
                Some("/idempotency_key".into()),
            )
        }
    };
    match JobRequest::parse(kind, request, "/request") {
        Ok(parsed) => enqueue(&state, parsed, key, "/request"),
        Err(v) => violation(v),
    }
}

async fn submit_sweep(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let doc = match parse_body(&body) {
        Ok(v) => v,
        Err(r) => return r,
    };
    match JobRequest::parse(JobKind::Sweep, &doc, "") {
        Ok(parsed) => enqueue(&state, parsed, header_key(&headers), ""),
        Err(v) => violation(v),
    }
}

async fn job_status(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match state.jobs.get(&id) {
        Some(record) => Json(record).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no job {id}"), None),
    }
}

fn content_type(name: &str) -> &'static str {
    match Path::new(name).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("csv") => "text/csv; charset=utf-8",
        Some("txt") | Some("log") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn job_artifact(State(state): State<AppState>, UrlPath((id, name)): UrlPath<(String, String)>) -> Response {
    let path = match state.jobs.artifact_path(&id, &name) {
        Ok(p) => p,
        Err(ArtifactError::UnknownJob) => return error(StatusCode::NOT_FOUND, format!("no job {id}"), None),
        Err(ArtifactError::UnknownArtifact) => {
            return error(StatusCode::NOT_FOUND, format!("job {id} has no artifact {name}"), None)
        }
        Err(ArtifactError::NotDone(status)) => {
            return error(
                StatusCode::CONFLICT,
                format!("job {id} is {status:?}; artifacts are served once it is done"),
                None,
            )
        }
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&name))], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

async fn list_sites(State(state): State<AppState>) -> Response {
    Json(json!({ "backbone": state.backbone, "sites": *state.sites })).into_response()
}

async fn schema() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], REQUEST_SCHEMA).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    Json(json!({ "ok": true, "queued": state.jobs.queued() })).into_response()
}

/// Runs one job to completion, recording its outcome.
pub fn run_job(jobs: &JobService, adapter: &ModelAdapter, config: &ToolkitConfig, id: &str, request: &JobRequest) {
    let dir = jobs.job_dir(id);
    let work = dir.join("work");
    let outcome = (|| {
        if work.exists() {
            std::fs::remove_dir_all(&work)?;
        }
        let ctx = RunContext { adapter, config };
        let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(&ctx, request, &work)));
        run.unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "job panicked".into());
            Err(crate::error::Error::Validation(format!("internal error: {msg}")))
        })
    })();
    if let Err(e) = &outcome {
        tracing::error!(job = id, error = %e, "job failed");
        let _ = std::fs::write(dir.join("job.log"), format!("{e}\n"));
    }
    if let Err(e) = jobs.finish(id, outcome) {
        tracing::error!(job = id, error = %e, "could not record job outcome");
    }
}

/// Starts `count` threads that drain the queue until the service closes.
pub fn spawn_workers(
    jobs: Arc<JobService>,
    adapter: Arc<ModelAdapter>,
    config: Arc<ToolkitConfig>,
    count: usize,
) -> Vec<JoinHandle<()>> {
    (0..count.max(1))
        .map(|n| {
            let (jobs, adapter, config) = (jobs.clone(), adapter.clone(), config.clone());
            std::thread::Builder::new()
                .name(format!("attnlab-worker-{n}"))
                .spawn(move || {
                    while let Some((id, request)) = jobs.next_job() {
                        tracing::info!(job = %id, kind = request.kind().as_str(), "job started");
                        run_job(&jobs, &adapter, &config, &id, &request);
                    }
                })
                .expect("spawn worker thread")
        })
        .collect()
}

/// Serves the API on `config.service_port` until interrupted.
pub async fn serve(config: ToolkitConfig, adapter: Arc<ModelAdapter>) -> Result<()> {
    let jobs = JobService::open(&config.storage_root, config.queue_capacity)?;
    let state = AppState::new(jobs.clone(), &adapter);
    let workers = spawn_workers(jobs.clone(), adapter, Arc::new(config.clone()), config.workers);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", config.service_port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    jobs.close();
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}
