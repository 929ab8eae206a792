//! Contracts for the pluggable model backends.
//!
//! Everything that needs a learned model (diffusion fine-tuning and sampling,
//! embeddings, segmentation, specialized-model training) goes through these
//! traits. Implementations must be deterministic for fixed inputs and seeds
//! unless their [`Capabilities`] say otherwise.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::imaging::{BitMask, RasterImage};
use crate::metrics::EmbeddingVector;
use crate::sanitizer::{RoleMask, SegmentRole, TaskKind};
use crate::utility::Detection;

/// Structured backend failure, as carried on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct BackendError {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

impl BackendError {
    pub fn new(code: impl Into<String>, message: impl Into<String>, retryable: bool) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            retryable,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new("invalid_argument", message, false)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new("unavailable", message, true)
    }
}

pub type BackendResult<T> = core::result::Result<T, BackendError>;

/// Opaque handle to a model held by a backend.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelRef(pub String);

impl ModelRef {
    pub const PRETRAINED: &'static str = "pretrained";

    pub fn pretrained() -> Self {
        ModelRef(Self::PRETRAINED.to_string())
    }

    pub fn is_pretrained(&self) -> bool {
        self.0 == Self::PRETRAINED
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Hyperparameters for subject fine-tuning of the generator, passed through verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub instance_token: String,
    pub prior_loss_weight: f64,
    pub gradient_accumulation_steps: u32,
    pub max_train_steps: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-6,
            instance_token: "xyz".to_string(),
            prior_loss_weight: 0.01,
            gradient_accumulation_steps: 2,
            max_train_steps: 800,
            extra: BTreeMap::new(),
        }
    }
}

/// A generated target object and the mask of its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTarget {
    pub image: RasterImage,
    pub alpha: BitMask,
}

pub trait GenerationBackend {
    /// Fine-tunes the generator on `references` for `role`.
    fn fine_tune(
        &self,
        role: SegmentRole,
        references: &[RasterImage],
        config: &FineTuneConfig,
    ) -> BackendResult<ModelRef>;

    /// Samples one target object (with alpha) of the given size.
    fn generate(
        &self,
        model: &ModelRef,
        prompt: &str,
        seed: u64,
        width: u32,
        height: u32,
    ) -> BackendResult<GeneratedTarget>;

    /// Produces `count` new reference images conditioned on feature images.
    fn condition_generate(
        &self,
        features: &[RasterImage],
        prompt: &str,
        seed: u64,
        count: usize,
    ) -> BackendResult<Vec<RasterImage>>;

    /// Fills the set pixels of `mask` in `canvas`.
    fn inpaint(
        &self,
        model: &ModelRef,
        canvas: &RasterImage,
        mask: &BitMask,
        prompt: &str,
        seed: u64,
    ) -> BackendResult<RasterImage>;
}

pub trait EmbeddingBackend {
    fn embed_images(&self, images: &[RasterImage]) -> BackendResult<Vec<EmbeddingVector>>;
    fn embed_texts(&self, texts: &[String]) -> BackendResult<Vec<EmbeddingVector>>;
}

pub trait SegmentationBackend {
    /// Target masks for each description, in order. The background is not returned.
    fn segment(&self, image: &RasterImage, targets: &[String]) -> BackendResult<Vec<RoleMask>>;
}

/// Hyperparameters for specialized-model training, passed through verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_family: String,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl TrainConfig {
    /// Classifier defaults (mobile backbone) or detector defaults, five epochs each.
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Self {
                model_family: "mobilenet_v2".to_string(),
                epochs: 5,
                learning_rate: 0.001,
                batch_size: 128,
                extra: BTreeMap::new(),
            },
            TaskKind::Detection => Self {
                model_family: "yolov8".to_string(),
                epochs: 5,
                learning_rate: 0.01,
                batch_size: 16,
                extra: BTreeMap::new(),
            },
        }
    }
}

/// Labelled image as sent to a training backend. Class ids index the dataset's class list.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: RasterImage,
    pub target: TrainingTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingTarget {
    Class(u32),
    Boxes(Vec<crate::utility::LabeledBox>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochResult {
    pub epoch: u32,
    pub validation_score: f64,
    pub model: ModelRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// The model before any training epoch.
    pub initial: ModelRef,
    pub epochs: Vec<EpochResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Class { class_id: u32, confidence: f64 },
    Detections(Vec<Detection>),
}

pub trait TrainingBackend {
    fn train(
        &self,
        task: TaskKind,
        classes: &[String],
        train: &[TrainingExample],
        validation: &[TrainingExample],
        config: &TrainConfig,
    ) -> BackendResult<TrainOutcome>;

    fn predict(&self, model: &ModelRef, images: &[RasterImage]) -> BackendResult<Vec<Prediction>>;
}

/// What a backend advertises.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub provider: String,
    pub deterministic: bool,
    pub returns_alpha: bool,
    pub endpoints: Vec<String>,
    pub features: Vec<String>,
}
