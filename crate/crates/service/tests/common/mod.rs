#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dash_core::dataset::BiasedDatasetSpec;
use dash_core::engine::TrainConfig;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn small_spec(seed: u64) -> BiasedDatasetSpec {
    let mut spec = BiasedDatasetSpec::colored_shapes(0.95, seed);
    spec.counts.train = 36;
    spec.counts.val = 12;
    spec.counts.test = 18;
    spec.image_size = 16;
    spec
}

pub fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 0.05,
        momentum: 0.9,
        shuffle_seed: seed,
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body from {uri}"))
    };
    (status, value)
}

/// Asserts success and returns the body.
pub async fn ok(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let (status, v) = call_json(app, method, uri, body).await;
    assert!(status.is_success(), "{method} {uri} -> {status}: {v}");
    v
}

pub async fn wait_job(app: &Router, job_id: &str) -> Value {
    loop {
        let job = ok(app, "GET", &format!("/api/v1/jobs/{job_id}"), None).await;
        match job["state"].as_str().unwrap() {
            "done" | "failed" => return job,
            _ => tokio::time::sleep(std::time::Duration::from_millis(20)).await,
        }
    }
}

/// Creates a session on a small generated dataset and waits for its first
/// training job.
pub async fn trained_session(app: &Router, id: &str, seed: u64) -> Value {
    let created = ok(
        app,
        "POST",
        "/api/v1/sessions",
        Some(json!({
            "id": id,
            "dataset_spec": small_spec(seed),
            "train": quick_train(seed),
        })),
    )
    .await;
    let job = wait_job(app, created["job"]["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    ok(app, "GET", &format!("/api/v1/sessions/{id}"), None).await
}
