//! Request and response bodies of the `/v1/backend/*` protocol. Every call
//! carries a `request_id` that the server echoes; images and masks travel as
//! base64 PNG; failures use the `{code, message, retryable}` envelope.

use privsynth_core::backend::{
    Capabilities, EpochResult, FineTuneConfig, ModelRef, Prediction, TrainConfig, TrainingTarget,
};
use privsynth_core::metrics::EmbeddingVector;
use privsynth_core::sanitizer::{FeatureKind, SegmentRole, TaskKind};
use serde::{Deserialize, Serialize};

pub const PREFIX: &str = "/v1/backend";

pub const ENDPOINTS: [&str; 9] = [
    "fine_tune",
    "generate",
    "condition_generate",
    "inpaint",
    "embed",
    "segment",
    "features",
    "train",
    "predict",
];

/// Base64 PNG.
pub type WireImage = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneRequest {
    pub request_id: String,
    pub role: SegmentRole,
    pub images: Vec<WireImage>,
    pub config: FineTuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub request_id: String,
    pub model_ref: ModelRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub request_id: String,
    pub model_ref: ModelRef,
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default = "yes")]
    pub want_alpha: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub request_id: String,
    pub image: WireImage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionGenerateRequest {
    pub request_id: String,
    pub features: Vec<WireImage>,
    pub prompt: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesResponse {
    pub request_id: String,
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequest {
    pub request_id: String,
    pub model_ref: ModelRef,
    pub canvas: WireImage,
    pub mask: WireImage,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub request_id: String,
    pub image: WireImage,
}

/// Embeds `images` then `texts`; the response keeps that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequest {
    pub request_id: String,
    #[serde(default)]
    pub images: Vec<WireImage>,
    #[serde(default)]
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub request_id: String,
    pub embeddings: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub request_id: String,
    pub image: WireImage,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub role: SegmentRole,
    pub mask: WireImage,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub request_id: String,
    pub masks: Vec<WireMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesRequest {
    pub request_id: String,
    pub kind: FeatureKind,
    pub image: WireImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireExample {
    pub image: WireImage,
    pub target: TrainingTarget,
}

/// The training set travels inline rather than as a dataset reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub request_id: String,
    pub task: TaskKind,
    pub classes: Vec<String>,
    pub train: Vec<WireExample>,
    pub validation: Vec<WireExample>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub request_id: String,
    pub initial: ModelRef,
    pub epochs: Vec<EpochResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub request_id: String,
    pub model_ref: ModelRef,
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub request_id: String,
    pub predictions: Vec<Prediction>,
}

pub type CapabilitiesResponse = Capabilities;

pub fn new_request_id() -> String {
    uuid::Uuid::new_v4().to_string()
}
