//! HTTP JSON API over a loaded checkpoint.
//!
//! Images travel as base64 PNG. Masks are grayscale PNGs where white is
//! context and black is target. Weights are shared read-only; a semaphore
//! caps how many sampling jobs run at once on the blocking pool.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use csi_core::checkpoint::CHECKPOINT_VERSION;
use csi_core::dataset::{decode_mask_png, decode_png, encode_png};
use csi_core::model::{Model, Stage};
use csi_core::service::{self, InpaintRequest, LatentSource, TraversalMode, TraversalRequest, LATENT_RANGE};
use csi_core::vaecore::{ContextMask, Image, Preset};
use csi_core::Error;

/// Cells in a traversal when the request gives no values.
pub const DEFAULT_TRAVERSAL_STEPS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub preset: Preset,
    #[serde(rename = "D")]
    pub latent_dim: usize,
    #[serde(rename = "M")]
    pub image_size: usize,
    pub channels: usize,
    pub stage: Stage,
    pub version: u32,
}

impl ModelInfo {
    pub fn of(model: &Model<f32>) -> Self {
        ModelInfo {
            preset: model.cfg.preset,
            latent_dim: model.latent_dim(),
            image_size: model.image_size(),
            channels: model.channels(),
            stage: model.stage,
            version: CHECKPOINT_VERSION,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<Model<f32>>,
    info: ModelInfo,
    jobs: Arc<Semaphore>,
}

impl AppState {
    /// `workers` bounds concurrent sampling jobs; zero is treated as one.
    pub fn new(model: Model<f32>, workers: usize) -> Self {
        let info = ModelInfo::of(&model);
        AppState { model: Arc::new(model), info, jobs: Arc::new(Semaphore::new(workers.max(1))) }
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    async fn run<R, F>(&self, job: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&Model<f32>) -> csi_core::Result<R> + Send + 'static,
    {
        let permit = self.jobs.clone().acquire_owned().await.map_err(|e| ApiError::Internal(e.to_string()))?;
        let model = self.model.clone();
        let out = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            job(&model)
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(out?)
    }
}

#[derive(Debug)]
pub enum ApiError {
    /// Undecodable payload.
    BadRequest(String),
    /// Well-formed but inconsistent with the model.
    Unprocessable(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Image(_) => ApiError::BadRequest(e.to_string()),
            Error::Shape { .. } | Error::OverrideIndex { .. } | Error::InvalidArgument(_) | Error::NonFinite(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                tracing::error!(%m, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(ErrorBody { error })).into_response()
    }
}

fn default_true() -> bool {
    true
}

fn default_count() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeBody {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintBody {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub overrides: BTreeMap<usize, f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_true")]
    pub truncated: bool,
    #[serde(default)]
    pub latent: LatentSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub images: Vec<String>,
    pub latents: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraverseBody {
    pub image: String,
    pub mask: String,
    pub index: usize,
    /// Defaults to evenly spaced values over the slider range.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TraversalMode,
    #[serde(default = "default_true")]
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraverseResponse {
    pub values: Vec<f64>,
    pub grid: Vec<String>,
}

fn decode_b64(field: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD.decode(s.trim()).map_err(|e| ApiError::BadRequest(format!("{field}: {e}")))
}

fn decode_inputs(info: &ModelInfo, image: &str, mask: &str) -> Result<(Image, ContextMask), ApiError> {
    let image = decode_png(&decode_b64("image", image)?, info.channels).map_err(|e| ApiError::BadRequest(format!("image: {e}")))?;
    let mask = decode_mask_png(&decode_b64("mask", mask)?).map_err(|e| ApiError::BadRequest(format!("mask: {e}")))?;
    Ok((image, mask))
}

fn encode_images(images: &[Image]) -> csi_core::Result<Vec<String>> {
    images.iter().map(|i| Ok(STANDARD.encode(encode_png(i)?))).collect()
}

async fn model_info(State(state): State<AppState>) -> Json<ModelInfo> {
    Json(state.info.clone())
}

async fn encode(State(state): State<AppState>, Json(body): Json<EncodeBody>) -> Result<Json<EncodeResponse>, ApiError> {
    let (image, mask) = decode_inputs(&state.info, &body.image, &body.mask)?;
    let q = state.run(move |m| service::infer_latents(m, &image, &mask, body.seed)).await?;
    Ok(Json(EncodeResponse { variance: q.variance(), mean: q.mean }))
}

async fn inpaint(State(state): State<AppState>, Json(body): Json<InpaintBody>) -> Result<Json<InpaintResponse>, ApiError> {
    let (image, mask) = decode_inputs(&state.info, &body.image, &body.mask)?;
    let req = InpaintRequest {
        image,
        mask,
        overrides: body.overrides,
        seed: body.seed,
        count: body.count,
        truncated: body.truncated,
        latent: body.latent,
    };
    let (images, latents) = state
        .run(move |m| {
            let out = service::inpaint(m, &req)?;
            Ok((encode_images(&out.images)?, out.latents))
        })
        .await?;
    Ok(Json(InpaintResponse { images, latents }))
}

async fn traverse(State(state): State<AppState>, Json(body): Json<TraverseBody>) -> Result<Json<TraverseResponse>, ApiError> {
    let (image, mask) = decode_inputs(&state.info, &body.image, &body.mask)?;
    let values = body.values.unwrap_or_else(|| service::evenly_spaced(LATENT_RANGE.0, LATENT_RANGE.1, DEFAULT_TRAVERSAL_STEPS));
    let req = TraversalRequest { image, mask, index: body.index, values, seed: body.seed, mode: body.mode, truncated: body.truncated };
    let values = req.values.clone();
    let grid = state.run(move |m| encode_images(&service::latent_traversal(m, &req)?)).await?;
    Ok(Json(TraverseResponse { values, grid }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/model", get(model_info))
        .route("/v1/encode", post(encode))
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/traverse", post(traverse))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, model = ?state.info, "serving");
    axum::serve(listener, router(state)).await
}
