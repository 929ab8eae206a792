//! Serves any [`ModelBackend`] under `/v1/backend/*`.

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use privsynth_core::backend::{BackendError, TrainingExample};
use privsynth_core::imaging::{BitMask, RasterImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::backend::{core_to_backend, ModelBackend, SharedBackend};
use crate::error::ErrorEnvelope;
use crate::protocol::*;
use crate::wire::{decode_image, encode_image};

pub fn status_for(code: &str, retryable: bool) -> StatusCode {
    match code {
        "not_found" => StatusCode::NOT_FOUND,
        "conflict" => StatusCode::CONFLICT,
        "payload_too_large" => StatusCode::PAYLOAD_TOO_LARGE,
        "invalid_argument" | "schema_error" | "parse_error" | "unsupported_feature" | "image_decode_error" => {
            StatusCode::BAD_REQUEST
        }
        _ if retryable => StatusCode::SERVICE_UNAVAILABLE,
        "internal" | "io_error" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

pub fn envelope_response(env: ErrorEnvelope) -> Response {
    (status_for(&env.code, env.retryable), Json(env)).into_response()
}

impl IntoResponse for crate::Error {
    fn into_response(self) -> Response {
        envelope_response(self.envelope())
    }
}

fn backend_error(e: BackendError) -> Response {
    envelope_response(ErrorEnvelope {
        code: e.code,
        message: e.message,
        retryable: e.retryable,
        field: None,
    })
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        crate::Error::schema(field, e.into_inner()).into_response()
    })
}

fn img(b64: &str, field: &str) -> Result<RasterImage, BackendError> {
    decode_image(b64, field).map_err(|e| BackendError::invalid(e.to_string()))
}

fn imgs(v: &[WireImage], field: &str) -> Result<Vec<RasterImage>, BackendError> {
    v.iter()
        .enumerate()
        .map(|(i, b)| img(b, &format!("{field}[{i}]")))
        .collect()
}

fn examples(v: &[WireExample], field: &str) -> Result<Vec<TrainingExample>, BackendError> {
    v.iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(TrainingExample {
                image: img(&e.image, &format!("{field}[{i}].image"))?,
                target: e.target.clone(),
            })
        })
        .collect()
}

/// Parses the body, runs `f` on a blocking thread and serializes the result.
async fn handle<Req, Resp, F>(backend: SharedBackend, body: Bytes, f: F) -> Response
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
    F: FnOnce(&dyn ModelBackend, Req) -> Result<Resp, BackendError> + Send + 'static,
{
    let req: Req = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match tokio::task::spawn_blocking(move || f(backend.as_ref(), req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => backend_error(e),
        Err(e) => backend_error(BackendError::new("internal", format!("worker panicked: {e}"), false)),
    }
}

async fn fine_tune(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: FineTuneRequest| {
        let refs = imgs(&r.images, "images")?;
        Ok(ModelResponse {
            model_ref: b.fine_tune(r.role, &refs, &r.config)?,
            request_id: r.request_id,
        })
    })
    .await
}

async fn generate(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: GenerateRequest| {
        let t = b.generate(&r.model_ref, &r.prompt, r.seed, r.width, r.height)?;
        Ok(GenerateResponse {
            request_id: r.request_id,
            image: encode_image(&t.image),
            alpha: r.want_alpha.then(|| encode_image(&t.alpha.to_image())),
        })
    })
    .await
}

async fn condition_generate(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: ConditionGenerateRequest| {
        let features = imgs(&r.features, "features")?;
        let out = b.condition_generate(&features, &r.prompt, r.seed, r.count)?;
        Ok(ImagesResponse {
            request_id: r.request_id,
            images: out.iter().map(encode_image).collect(),
        })
    })
    .await
}

async fn inpaint(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: InpaintRequest| {
        let canvas = img(&r.canvas, "canvas")?;
        let mask = BitMask::from_image(&img(&r.mask, "mask")?);
        let out = b.inpaint(&r.model_ref, &canvas, &mask, &r.prompt, r.seed)?;
        Ok(ImageResponse {
            request_id: r.request_id,
            image: encode_image(&out),
        })
    })
    .await
}

async fn embed(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: EmbedRequest| {
        let images = imgs(&r.images, "images")?;
        let mut embeddings = if images.is_empty() { Vec::new() } else { b.embed_images(&images)? };
        if !r.texts.is_empty() {
            embeddings.extend(b.embed_texts(&r.texts)?);
        }
        Ok(EmbedResponse {
            request_id: r.request_id,
            embeddings,
        })
    })
    .await
}

async fn segment(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: SegmentRequest| {
        let image = img(&r.image, "image")?;
        let masks = b.segment(&image, &r.targets)?;
        Ok(SegmentResponse {
            request_id: r.request_id,
            masks: masks
                .iter()
                .map(|m| WireMask {
                    role: m.role,
                    mask: encode_image(&m.mask.to_image()),
                    confidence: m.confidence,
                })
                .collect(),
        })
    })
    .await
}

async fn features(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: FeaturesRequest| {
        let image = img(&r.image, "image")?;
        let out = b.extract(r.kind, &image).map_err(core_to_backend)?;
        Ok(ImageResponse {
            request_id: r.request_id,
            image: encode_image(&out),
        })
    })
    .await
}

async fn train(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: TrainRequest| {
        let train = examples(&r.train, "train")?;
        let validation = examples(&r.validation, "validation")?;
        let out = b.train(r.task, &r.classes, &train, &validation, &r.config)?;
        Ok(TrainResponse {
            request_id: r.request_id,
            initial: out.initial,
            epochs: out.epochs,
        })
    })
    .await
}

async fn predict(State(b): State<SharedBackend>, body: Bytes) -> Response {
    handle(b, body, |b, r: PredictRequest| {
        let images = imgs(&r.images, "images")?;
        Ok(PredictResponse {
            predictions: b.predict(&r.model_ref, &images)?,
            request_id: r.request_id,
        })
    })
    .await
}

async fn capabilities(State(b): State<SharedBackend>) -> Response {
    match tokio::task::spawn_blocking(move || b.capabilities()).await {
        Ok(Ok(c)) => Json(c).into_response(),
        Ok(Err(e)) => backend_error(e),
        Err(e) => backend_error(BackendError::new("internal", e.to_string(), false)),
    }
}

/// Routes relative to `/v1/backend`; nest or use [`mounted`].
pub fn router(backend: SharedBackend, body_limit: usize) -> Router {
    Router::new()
        .route("/capabilities", get(capabilities))
        .route("/fine_tune", post(fine_tune))
        .route("/generate", post(generate))
        .route("/condition_generate", post(condition_generate))
        .route("/inpaint", post(inpaint))
        .route("/embed", post(embed))
        .route("/segment", post(segment))
        .route("/features", post(features))
        .route("/train", post(train))
        .route("/predict", post(predict))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(backend)
}

pub fn mounted(backend: SharedBackend, body_limit: usize) -> Router {
    Router::new().nest(PREFIX, router(backend, body_limit))
}
