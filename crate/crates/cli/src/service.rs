//! HTTP inference service.
//!
//! * `POST /api/inpaint`: multipart fields `image` (RGB PNG) and `mask`
//!   (grayscale PNG); `raw=1` as a query parameter or form field returns the
//!   generator output instead of the composite. Responds with `image/png`.
//! * `GET /api/health`: `{status, model_step, image_size}`.
//! * `GET /api/model-info`: the training config stored in the checkpoint.
//!
//! At most `max_concurrent_inferences` requests run the model at once and at
//! most twice that many are admitted; anything beyond gets 429.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::Context;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tower_http::services::ServeDir;

use scat_core::imageio::{decode_rgb, encode_png};
use scat_core::inference::{InpaintOptions, Inpainter};
use scat_core::mask::Mask;

use crate::{Failure, ServeArgs};

const BODY_LIMIT: usize = 64 * 1024 * 1024;

/// Peak and total counts of model invocations.
#[derive(Debug, Default)]
pub struct Stats {
    running: AtomicUsize,
    peak: AtomicUsize,
    completed: AtomicUsize,
}

impl Stats {
    pub fn peak_running(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn completed(&self) -> usize {
        self.completed.load(Ordering::SeqCst)
    }
}

#[derive(Clone)]
pub struct AppState {
    inpainter: Arc<Inpainter>,
    model_info: Arc<Value>,
    admission: Arc<Semaphore>,
    compute: Arc<Semaphore>,
    max_image_dim: u32,
    stats: Arc<Stats>,
}

impl AppState {
    pub fn new(inpainter: Inpainter, max_concurrent_inferences: usize, max_image_dim: u32) -> Self {
        let max = max_concurrent_inferences.max(1);
        let model_info = serde_json::to_value(&inpainter.info().config).unwrap_or(Value::Null);
        Self {
            inpainter: Arc::new(inpainter),
            model_info: Arc::new(model_info),
            admission: Arc::new(Semaphore::new(2 * max)),
            compute: Arc::new(Semaphore::new(max)),
            max_image_dim,
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    /// Takes one admission slot if any is free. Requests hold one for their
    /// whole lifetime.
    pub fn try_admit(&self) -> Option<OwnedSemaphorePermit> {
        self.admission.clone().try_acquire_owned().ok()
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
struct InpaintQuery {
    raw: Option<String>,
}

fn truthy(v: &str) -> bool {
    matches!(v.trim(), "1" | "true" | "yes")
}

async fn inpaint(
    State(state): State<AppState>,
    Query(query): Query<InpaintQuery>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let _admitted = state
        .try_admit()
        .ok_or_else(|| ApiError::new(StatusCode::TOO_MANY_REQUESTS, "server is at capacity, retry later"))?;
    let mut multipart = multipart.map_err(|e| ApiError::bad_request(e.body_text()))?;

    let mut image_bytes = None;
    let mut mask_bytes = None;
    let mut raw = query.raw.as_deref().is_some_and(truthy);
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("reading field {name:?}: {e}")))?;
        match name.as_str() {
            "image" => image_bytes = Some(data),
            "mask" => mask_bytes = Some(data),
            "raw" => raw = truthy(&String::from_utf8_lossy(&data)),
            _ => {}
        }
    }
    let image_bytes = image_bytes.ok_or_else(|| ApiError::bad_request("missing multipart field `image`"))?;
    let mask_bytes = mask_bytes.ok_or_else(|| ApiError::bad_request("missing multipart field `mask`"))?;
    let image = decode_rgb(&image_bytes).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    let mask = Mask::decode_png(&mask_bytes).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;

    let (w, h) = image.dimensions();
    if w.max(h) > state.max_image_dim {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("image is {w}x{h}, the limit is {} pixels per side", state.max_image_dim),
        ));
    }
    let opts = InpaintOptions {
        return_raw: raw,
        resize: false,
    };
    state
        .inpainter
        .check(&image, &mask, opts)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;

    let _running = state
        .compute
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down"))?;
    let worker = state.clone();
    let png = tokio::task::spawn_blocking(move || {
        let stats = &worker.stats;
        let now = stats.running.fetch_add(1, Ordering::SeqCst) + 1;
        stats.peak.fetch_max(now, Ordering::SeqCst);
        let out = worker.inpainter.inpaint(&image, &mask, opts);
        stats.running.fetch_sub(1, Ordering::SeqCst);
        stats.completed.fetch_add(1, Ordering::SeqCst);
        out.map(|img| encode_png(&img))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "model_step": state.inpainter.info().step,
        "image_size": state.inpainter.image_size(),
    }))
}

async fn model_info(State(state): State<AppState>) -> Json<Value> {
    Json(state.model_info.as_ref().clone())
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/inpaint", post(inpaint))
        .route("/api/health", get(health))
        .route("/api/model-info", get(model_info))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn serve_blocking(args: &ServeArgs) -> Result<(), Failure> {
    if !args.checkpoint.is_file() {
        return Err(Failure::new(
            crate::exit::BAD_INPUT,
            anyhow::anyhow!("file not found: {}", args.checkpoint.display()),
        ));
    }
    let inpainter = Inpainter::load(&args.checkpoint)?;
    log::info!(
        "loaded checkpoint {} at step {}",
        args.checkpoint.display(),
        inpainter.info().step
    );
    let state = AppState::new(inpainter, args.max_concurrent_inferences as usize, args.max_image_dim);
    let app = router(state, args.static_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let addr = SocketAddr::from(([0, 0, 0, 0], args.port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        serve(listener, app).await.context("serving")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
