//! HTTP backend for the explorer.
//!
//! Reads go against an immutable snapshot. Recompute requests are
//! serialized through a single mutex and each produces a fresh report; the
//! base snapshot is never replaced.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::Mutex;

use bfdecomp::io::bundle::ProblemBundle;
use bfdecomp::io::report::{to_json_bytes, Report};
use bfdecomp::pipeline::{run, PipelineOptions, PipelineOutput};
use bfdecomp::Error;

enum Source {
    /// A report read from disk; no model behind it.
    Report,
    /// Report computed here; rows are available on demand.
    Fitted(Box<Fitted>),
}

struct Fitted {
    output: PipelineOutput,
    bundle: ProblemBundle,
    opts: PipelineOptions,
    recompute: bool,
}

pub struct AppState {
    report_bytes: Bytes,
    n_obs: usize,
    source: Source,
    writer: Mutex<()>,
}

impl AppState {
    /// Static mode over a finished report.
    pub fn from_report(report: &Report) -> bfdecomp::Result<Self> {
        Ok(Self {
            report_bytes: Bytes::from(to_json_bytes(report)?),
            n_obs: report.records.len(),
            source: Source::Report,
            writer: Mutex::new(()),
        })
    }

    /// Run the pipeline once. With `recompute` false the service is static
    /// but can still serve weight rows.
    pub fn from_bundle(
        bundle: ProblemBundle,
        opts: PipelineOptions,
        recompute: bool,
    ) -> bfdecomp::Result<Self> {
        let output = run(&bundle, &opts)?;
        Ok(Self {
            report_bytes: Bytes::from(to_json_bytes(&output.report)?),
            n_obs: output.report.records.len(),
            source: Source::Fitted(Box::new(Fitted {
                output,
                bundle,
                opts,
                recompute,
            })),
            writer: Mutex::new(()),
        })
    }

    pub fn mode(&self) -> &'static str {
        match &self.source {
            Source::Fitted(f) if f.recompute => "recompute",
            _ => "static",
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/report", get(report))
        .route("/api/weights/row/{i}", get(weight_row))
        .route("/api/recompute", post(recompute))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let body = serde_json::json!({ "error": message.into() });
    (status, Json(body)).into_response()
}

fn core_error(e: Error) -> Response {
    let status = match &e {
        Error::IndexOutOfRange { .. } => StatusCode::NOT_FOUND,
        e if e.is_numerical() => StatusCode::UNPROCESSABLE_ENTITY,
        Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    };
    error(status, e.to_string())
}

fn json_bytes(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(serde_json::json!({
        "status": "ok",
        "mode": state.mode(),
        "n_obs": state.n_obs,
    }))
    .into_response()
}

async fn report(State(state): State<Arc<AppState>>) -> Response {
    json_bytes(state.report_bytes.clone())
}

async fn weight_row(State(state): State<Arc<AppState>>, Path(i): Path<String>) -> Response {
    let Ok(i) = i.parse::<usize>() else {
        return error(StatusCode::NOT_FOUND, format!("no row `{i}`"));
    };
    if i >= state.n_obs {
        return error(
            StatusCode::NOT_FOUND,
            format!("row {i} out of range for {} observations", state.n_obs),
        );
    }
    let Source::Fitted(_) = &state.source else {
        return error(
            StatusCode::CONFLICT,
            "weights need the model; serve with --data and --spec",
        );
    };
    let st = state.clone();
    let row = tokio::task::spawn_blocking(move || match &st.source {
        Source::Fitted(f) => f.output.weight_row(i),
        Source::Report => unreachable!(),
    })
    .await;
    match row {
        Ok(Ok(w)) => Json(serde_json::json!({ "row": i, "weights": w })).into_response(),
        Ok(Err(e)) => core_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecomputeBody {
    deleted: Vec<usize>,
}

async fn recompute(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    if state.mode() != "recompute" {
        return error(StatusCode::CONFLICT, "recompute is disabled in static mode");
    }
    let mut deleted = match serde_json::from_slice::<RecomputeBody>(&body) {
        Ok(b) => b.deleted,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    deleted.sort_unstable();
    deleted.dedup();
    if let Some(&bad) = deleted.iter().find(|&&d| d >= state.n_obs) {
        return error(
            StatusCode::NOT_FOUND,
            format!("row {bad} out of range for {} observations", state.n_obs),
        );
    }
    if deleted.len() == state.n_obs {
        return error(StatusCode::BAD_REQUEST, "cannot delete every observation");
    }

    let _guard = state.writer.lock().await;
    let st = state.clone();
    let result = tokio::task::spawn_blocking(move || -> bfdecomp::Result<Vec<u8>> {
        let Source::Fitted(f) = &st.source else {
            unreachable!()
        };
        let reduced = f.bundle.without_rows(&deleted)?;
        to_json_bytes(&run(&reduced, &f.opts)?.report)
    })
    .await;
    match result {
        Ok(Ok(bytes)) => json_bytes(Bytes::from(bytes)),
        Ok(Err(e)) => core_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!(
        "serving {} report on http://{}",
        state.mode(),
        listener.local_addr()?
    );
    axum::serve(listener, router(Arc::new(state))).await
}
