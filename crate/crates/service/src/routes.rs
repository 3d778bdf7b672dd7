use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use dash_core::dataset::Split;
use dash_core::projection::TsneParams;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, AugmentRequest, ClusterRequest, CreateSession, DiffQuery, TrainRequest, TranslateRequest};

/// All routes, nested under `/api/v1`.
pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/train", post(start_training))
        .route("/jobs/{id}", get(get_job))
        .route("/sessions/{id}/checkpoints/{cid}/activate", post(activate))
        .route("/sessions/{id}/checkpoints/{cid}", delete(discard))
        .route("/sessions/{id}/predictions", get(predictions))
        .route("/sessions/{id}/projection", get(projection))
        .route("/sessions/{id}/density", get(density))
        .route("/sessions/{id}/gradcam", get(gradcam))
        .route("/sessions/{id}/clusters", post(cluster))
        .route("/sessions/{id}/clusters/{k}/representatives", get(representatives))
        .route("/sessions/{id}/translate", post(translate))
        .route("/sessions/{id}/augment", post(augment))
        .route("/sessions/{id}/mosaic", get(mosaic))
        .route("/sessions/{id}/trace", get(trace))
        .route("/sessions/{id}/frequent", get(frequent))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/images/{image_id}", get(image))
        .with_state(state);
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::invalid(e.body_text()))
}

fn query<T: DeserializeOwned>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::invalid(e.body_text()))
}

fn json_bytes(bytes: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], (*bytes).clone()).into_response()
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    let created = blocking(move || state.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.session_ids())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || state.get_session(&id)).await?).into_response())
}

async fn start_training(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<TrainRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    let job = blocking(move || state.start_training(&id, req)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || state.job(&id)).await?).into_response())
}

async fn activate(State(state): State<AppState>, Path((id, cid)): Path<(String, String)>) -> ApiResult<Response> {
    Ok(Json(blocking(move || state.activate(&id, &cid)).await?).into_response())
}

async fn discard(State(state): State<AppState>, Path((id, cid)): Path<(String, String)>) -> ApiResult<Response> {
    Ok(Json(blocking(move || state.discard(&id, &cid)).await?).into_response())
}

#[derive(Deserialize)]
struct PredictionsQuery {
    split: Option<Split>,
    checkpoint: Option<String>,
}

async fn predictions(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PredictionsQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let split = q.split.unwrap_or(Split::Test);
    let bytes = blocking(move || state.predictions(&id, split, q.checkpoint.as_deref())).await?;
    Ok(json_bytes(bytes))
}

#[derive(Deserialize)]
struct ProjectionQuery {
    perplexity: Option<f64>,
    seed: Option<u64>,
    iterations: Option<usize>,
    checkpoint: Option<String>,
    class: Option<usize>,
    resolution: Option<usize>,
}

impl ProjectionQuery {
    fn params(&self) -> TsneParams {
        let mut p = TsneParams::default();
        p.perplexity = self.perplexity;
        if let Some(seed) = self.seed {
            p.seed = seed;
        }
        if let Some(iterations) = self.iterations {
            p.iterations = iterations;
        }
        p
    }
}

async fn projection(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<ProjectionQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let bytes = blocking(move || state.projection(&id, &q.params(), q.checkpoint.as_deref())).await?;
    Ok(json_bytes(bytes))
}

async fn density(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<ProjectionQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let bytes =
        blocking(move || state.density(&id, &q.params(), q.class, q.resolution, q.checkpoint.as_deref())).await?;
    Ok(json_bytes(bytes))
}

#[derive(Deserialize)]
struct GradcamQuery {
    image: String,
    class: Option<usize>,
    alpha: Option<f64>,
    checkpoint: Option<String>,
}

async fn gradcam(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<GradcamQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let bytes = blocking(move || state.gradcam(&id, &q.image, q.class, q.alpha, q.checkpoint.as_deref())).await?;
    Ok(json_bytes(bytes))
}

async fn cluster(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<ClusterRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    Ok(Json(blocking(move || state.cluster(&id, req)).await?).into_response())
}

#[derive(Deserialize)]
struct RepresentativesQuery {
    n: Option<usize>,
}

async fn representatives(
    State(state): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
    q: Result<Query<RepresentativesQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    Ok(Json(blocking(move || state.representatives(&id, k, q.n)).await?).into_response())
}

async fn translate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<TranslateRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    Ok(Json(blocking(move || state.translate(&id, req)).await?).into_response())
}

async fn augment(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<AugmentRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    Ok(Json(blocking(move || state.augment(&id, req)).await?).into_response())
}

async fn mosaic(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<DiffQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    Ok(json_bytes(blocking(move || state.mosaic(&id, &q)).await?))
}

async fn trace(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<DiffQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    Ok(json_bytes(blocking(move || state.trace(&id, &q)).await?))
}

#[derive(Deserialize)]
struct FrequentQuery {
    threshold: Option<f64>,
    split: Option<Split>,
}

async fn frequent(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<FrequentQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    Ok(Json(blocking(move || state.frequent(&id, q.threshold, q.split)).await?).into_response())
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || state.history(&id)).await?).into_response())
}

async fn image(
    State(state): State<AppState>,
    Path((id, image_id)): Path<(String, String)>,
) -> ApiResult<Response> {
    let png = blocking(move || state.image(&id, &image_id).map(|img| img.encode_png())).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
