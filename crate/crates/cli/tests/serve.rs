use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use tower::ServiceExt;

use bfdecomp::io::bundle::load_problem;
use bfdecomp::io::report::{from_json_slice, to_json_bytes};
use bfdecomp::pipeline::{run, PipelineOptions};
use bfdecomp_cli::serve::{router, AppState};

fn radon_paths() -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/radon");
    (dir.join("radon.csv"), dir.join("radon.json"))
}

fn app(recompute: bool) -> Router {
    let (data, spec) = radon_paths();
    let bundle = load_problem(&data, &spec).unwrap();
    let state = AppState::from_bundle(bundle, PipelineOptions::default(), recompute).unwrap();
    router(Arc::new(state))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn recompute(body: &str) -> Request<Body> {
    Request::post("/api/recompute")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn report_has_every_record() {
    let app = app(true);
    let (status, body) = send(&app, get("/api/report")).await;
    assert_eq!(status, StatusCode::OK);
    let report = from_json_slice(&body).unwrap();
    assert_eq!(report.records.len(), 919);

    let (status, body) = send(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    let health: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["mode"], "recompute");
}

#[tokio::test]
async fn empty_deletion_is_byte_identical() {
    let app = app(true);
    let (_, base) = send(&app, get("/api/report")).await;
    let (status, again) = send(&app, recompute(r#"{"deleted": []}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(
        base == again,
        "recompute with no deletions changed the report"
    );
}

#[tokio::test]
async fn deletion_matches_fresh_run() {
    let app = app(true);
    let deleted = [3usize, 400, 911];
    let (status, body) = send(&app, recompute(r#"{"deleted": [911, 3, 400, 3]}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let report = from_json_slice(&body).unwrap();
    assert_eq!(report.records.len(), 916);
    for r in &report.records {
        assert!((r.shrinkage + r.pooling - 1.0).abs() < 1e-12);
    }

    // Same bytes as a pipeline run on the reduced data.
    let (data, spec) = radon_paths();
    let reduced = load_problem(&data, &spec)
        .unwrap()
        .without_rows(&deleted)
        .unwrap();
    let opts = PipelineOptions {
        keep_full: true,
        ..Default::default()
    };
    let fresh = run(&reduced, &opts).unwrap();
    assert!(to_json_bytes(&fresh.report).unwrap() == body);
    let w = fresh.weights.unwrap();
    for i in 0..w.nrows() {
        assert!((w.row(i).sum() - 1.0).abs() < 1e-8);
    }
}

#[tokio::test]
async fn weight_rows_on_demand() {
    let app = app(true);
    let (status, body) = send(&app, get("/api/weights/row/17")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
    assert_eq!(w.len(), 919);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);

    for uri in ["/api/weights/row/919", "/api/weights/row/-1"] {
        let (status, _) = send(&app, get(uri)).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn rejects_bad_requests() {
    let app = app(true);
    for body in [
        "",
        "{",
        r#"{"deleted": "all"}"#,
        r#"{"removed": [1]}"#,
        "[1, 2]",
    ] {
        let (status, _) = send(&app, recompute(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body:?}");
    }
    let (status, _) = send(&app, recompute(r#"{"deleted": [5000]}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_mode_refuses_recompute() {
    let app = app(false);
    let (status, _) = send(&app, recompute(r#"{"deleted": []}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // A report read from disk serves itself but has no rows to offer.
    let (data, spec) = radon_paths();
    let out = run(&load_problem(&data, &spec).unwrap(), &Default::default()).unwrap();
    let app = router(Arc::new(AppState::from_report(&out.report).unwrap()));
    let (status, body) = send(&app, get("/api/report")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body == to_json_bytes(&out.report).unwrap());
    let (status, _) = send(&app, get("/api/weights/row/0")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send(&app, recompute(r#"{"deleted": [1]}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}
