//! HTTP query service: `POST /query`, `GET /health`.
//!
//! The router comes up before the pipeline is loaded and answers 503 until
//! loading finishes. Queries run on the blocking pool against one shared,
//! read-only pipeline.

use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prag_core::pipeline::{Mode, Pipeline, PipelineError};
use prag_core::retriever::id_hex;
use serde::Deserialize;
use serde_json::json;

#[derive(Debug)]
pub struct AppState {
    pipeline: OnceLock<Arc<Pipeline>>,
    load_error: OnceLock<String>,
    default_mode: Mode,
    default_k: usize,
}

impl AppState {
    pub fn new(default_mode: Mode, default_k: usize) -> Arc<Self> {
        Arc::new(AppState { pipeline: OnceLock::new(), load_error: OnceLock::new(), default_mode, default_k })
    }

    pub fn ready(default_mode: Mode, default_k: usize, pipeline: Pipeline) -> Arc<Self> {
        let state = Self::new(default_mode, default_k);
        state.set_pipeline(pipeline);
        state
    }

    pub fn set_pipeline(&self, pipeline: Pipeline) {
        let _ = self.pipeline.set(Arc::new(pipeline));
    }

    pub fn set_load_error(&self, message: String) {
        let _ = self.load_error.set(message);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    question: String,
    mode: Option<String>,
    k: Option<usize>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_ready(state: &AppState) -> Response {
    match state.load_error.get() {
        Some(e) => error(StatusCode::SERVICE_UNAVAILABLE, format!("loading failed: {e}")),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "still loading"),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let Some(p) = state.pipeline.get() else {
        let status = if state.load_error.get().is_some() { "failed" } else { "loading" };
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": status }))).into_response();
    };
    let adapters = p.store().map_or(0, |s| s.len());
    Json(json!({
        "status": "ok",
        "base_fingerprint": id_hex(p.base().fingerprint()),
        "documents": p.corpus().len(),
        "adapters": adapters,
        "default_mode": state.default_mode,
        "default_k": state.default_k,
    }))
    .into_response()
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(pipeline) = state.pipeline.get().cloned() else {
        return not_ready(&state);
    };
    let req: QueryRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let mode = match req.mode.as_deref().map(str::parse::<Mode>).transpose() {
        Ok(m) => m.unwrap_or(state.default_mode),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let k = req.k.unwrap_or(state.default_k);
    let joined = tokio::task::spawn_blocking(move || pipeline.answer(&req.question, mode, k)).await;
    match joined {
        Ok(Ok(result)) => Json(result).into_response(),
        Ok(Err(e @ (PipelineError::Overlong { .. } | PipelineError::InvalidK | PipelineError::UnknownMode(_)))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("query task failed: {e}")),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().route("/health", get(health)).route("/query", post(query)).with_state(state)
}

/// Serves on `listener`, loading the pipeline with `load` in the background.
pub async fn serve<F>(listener: tokio::net::TcpListener, state: Arc<AppState>, load: F) -> std::io::Result<()>
where
    F: FnOnce() -> anyhow::Result<Pipeline> + Send + 'static,
{
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(p) => loader.set_pipeline(p),
        Err(e) => {
            eprintln!("error: loading pipeline: {e:#}");
            loader.set_load_error(format!("{e:#}"));
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
