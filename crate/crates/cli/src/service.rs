//! HTTP inference service: `POST /inpaint` and `GET /health`.
//!
//! Images travel as base64 PNG inside JSON. The model is loaded once and
//! shared read-only between requests.

use std::fs;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, ImageReader};
use inpaint_core::networks::compute_receptive_field;
use inpaint_core::trainer::load_generator;
use inpaint_core::Generator32;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::complete::{complete_rgb, threshold_mask};
use crate::{AppError, AppResult};

/// Largest accepted image side.
pub const DEFAULT_MAX_SIDE: u32 = 4096;
/// Request bodies above this many bytes are refused before parsing. Two
/// base64 PNGs of the largest accepted size fit comfortably.
pub const BODY_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Debug, Default, Deserialize)]
pub struct InpaintOptions {
    /// Must name the served model when given.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub options: InpaintOptions,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
    pub levels: usize,
    pub receptive_field: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<&'static str>,
    pub message: String,
}

impl ApiError {
    fn bad(field: &'static str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, field: Some(field), message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.message, field: self.field.map(String::from) };
        (self.status, Json(body)).into_response()
    }
}

pub struct ServiceState {
    pub generator: Generator32,
    pub model_id: String,
    pub max_side: u32,
}

/// First 16 hex digits of the checkpoint's SHA-256.
pub fn model_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ServiceState {
    pub fn load(checkpoint: &Path) -> AppResult<Self> {
        let bytes = fs::read(checkpoint).map_err(|_| AppError::MissingCheckpoint(checkpoint.to_path_buf()))?;
        let (generator, _) = load_generator::<f32>(checkpoint)?;
        Ok(Self { generator, model_id: model_id(&bytes), max_side: DEFAULT_MAX_SIDE })
    }

    pub fn health(&self) -> Health {
        let spec = self.generator.spec();
        Health {
            status: "ok".into(),
            model_id: self.model_id.clone(),
            levels: spec.levels,
            receptive_field: compute_receptive_field(spec).size,
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving model {} on http://{}", state.model_id, listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(state.health())
}

async fn inpaint(State(state): State<Arc<ServiceState>>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(rejection) => {
            return ApiError { status: rejection.status(), field: Some("body"), message: rejection.body_text() }.into_response();
        }
    };
    match tokio::task::spawn_blocking(move || handle_inpaint(&state, &body)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, field: None, message: e.to_string() }.into_response(),
    }
}

fn decode_base64(field: &'static str, text: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD.decode(text.trim()).map_err(|e| ApiError::bad(field, format!("not valid base64: {e}")))
}

/// Read the header only, so oversized images are refused before decoding.
fn checked_dimensions(field: &'static str, bytes: &[u8], max_side: u32) -> Result<(u32, u32), ApiError> {
    let (w, h) = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .ok()
        .and_then(|r| r.into_dimensions().ok())
        .ok_or_else(|| ApiError::bad(field, "not a decodable PNG image"))?;
    if w > max_side || h > max_side {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            field: Some(field),
            message: format!("{w}x{h} exceeds the {max_side}x{max_side} limit"),
        });
    }
    Ok((w, h))
}

pub fn handle_inpaint(state: &ServiceState, body: &[u8]) -> Result<InpaintResponse, ApiError> {
    let req: InpaintRequest = serde_json::from_slice(body).map_err(|e| ApiError::bad("body", format!("malformed request: {e}")))?;
    if let Some(id) = &req.options.checkpoint {
        if *id != state.model_id {
            return Err(ApiError::bad("options.checkpoint", format!("unknown checkpoint {id:?}; this service runs {}", state.model_id)));
        }
    }
    let image_bytes = decode_base64("image", &req.image)?;
    let mask_bytes = decode_base64("mask", &req.mask)?;
    let (w, h) = checked_dimensions("image", &image_bytes, state.max_side)?;
    let (mw, mh) = checked_dimensions("mask", &mask_bytes, state.max_side)?;
    if (mw, mh) != (w, h) {
        return Err(ApiError::bad("mask", format!("mask is {mw}x{mh} but image is {w}x{h}")));
    }
    let image = image::load_from_memory(&image_bytes).map_err(|e| ApiError::bad("image", e.to_string()))?.to_rgb8();
    let mask = threshold_mask(&image::load_from_memory(&mask_bytes).map_err(|e| ApiError::bad("mask", e.to_string()))?.to_luma8());
    let out = complete_rgb(&state.generator, &image, &mask).map_err(|e| match e {
        AppError::Core(inpaint_core::Error::Resolution(m)) => ApiError::bad("image", m),
        AppError::Input { field, message } => ApiError::bad(field, message),
        other => ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, field: None, message: other.to_string() },
    })?;
    let mut png = Vec::new();
    out.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, field: None, message: e.to_string() })?;
    Ok(InpaintResponse { image: STANDARD.encode(png) })
}
