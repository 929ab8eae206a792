//! Blocking HTTP client for a remote `/v1/backend/*` server.

use std::time::Duration;

use privsynth_core::backend::{
    BackendError, BackendResult, Capabilities, EmbeddingBackend, FineTuneConfig, GeneratedTarget,
    GenerationBackend, ModelRef, Prediction, SegmentationBackend, TrainConfig, TrainOutcome,
    TrainingBackend, TrainingExample,
};
use privsynth_core::imaging::{BitMask, RasterImage};
use privsynth_core::metrics::EmbeddingVector;
use privsynth_core::sanitizer::{FeatureKind, FeatureService, RoleMask, SegmentRole, TaskKind};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::backend::{backend_to_core, ModelBackend};
use crate::error::ErrorEnvelope;
use crate::protocol::*;
use crate::wire::{decode_image, encode_image};

const MAX_RESPONSE: u64 = 1 << 31;

pub struct RemoteBackend {
    base: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}{PREFIX}/{endpoint}", self.base)
    }

    fn finish<T: DeserializeOwned>(&self, resp: ureq::http::Response<ureq::Body>) -> BackendResult<T> {
        let status = resp.status().as_u16();
        let mut resp = resp;
        let body = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE)
            .read_to_vec()
            .map_err(|e| BackendError::unavailable(format!("reading response: {e}")))?;
        if (200..300).contains(&status) {
            serde_json::from_slice(&body)
                .map_err(|e| BackendError::new("protocol_error", format!("malformed response: {e}"), false))
        } else {
            match serde_json::from_slice::<ErrorEnvelope>(&body) {
                Ok(env) => Err(BackendError::new(env.code, env.message, env.retryable)),
                Err(_) => Err(BackendError::new(
                    "protocol_error",
                    format!("HTTP {status} without an error envelope"),
                    status >= 500,
                )),
            }
        }
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, endpoint: &str, req: &Req) -> BackendResult<Resp> {
        let body = serde_json::to_vec(req).expect("request bodies serialize");
        let resp = self
            .agent
            .post(&self.url(endpoint))
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(|e| BackendError::unavailable(format!("{endpoint}: {e}")))?;
        self.finish(resp)
    }
}

fn check_id(sent: &str, got: &str) -> BackendResult<()> {
    if sent == got {
        Ok(())
    } else {
        Err(BackendError::new("protocol_error", "response request_id does not match", false))
    }
}

fn img(b64: &str, what: &str) -> BackendResult<RasterImage> {
    decode_image(b64, what).map_err(|e| BackendError::new("protocol_error", e.to_string(), false))
}

fn mask(b64: &str, what: &str) -> BackendResult<BitMask> {
    Ok(BitMask::from_image(&img(b64, what)?))
}

fn images(v: &[RasterImage]) -> Vec<WireImage> {
    v.iter().map(encode_image).collect()
}

impl GenerationBackend for RemoteBackend {
    fn fine_tune(&self, role: SegmentRole, references: &[RasterImage], config: &FineTuneConfig) -> BackendResult<ModelRef> {
        let request_id = new_request_id();
        let r: ModelResponse = self.call(
            "fine_tune",
            &FineTuneRequest {
                request_id: request_id.clone(),
                role,
                images: images(references),
                config: config.clone(),
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        Ok(r.model_ref)
    }

    fn generate(&self, model: &ModelRef, prompt: &str, seed: u64, width: u32, height: u32) -> BackendResult<GeneratedTarget> {
        let request_id = new_request_id();
        let r: GenerateResponse = self.call(
            "generate",
            &GenerateRequest {
                request_id: request_id.clone(),
                model_ref: model.clone(),
                prompt: prompt.into(),
                seed,
                width,
                height,
                want_alpha: true,
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        let alpha = r
            .alpha
            .as_deref()
            .ok_or_else(|| BackendError::new("protocol_error", "generate returned no alpha mask", false))?;
        Ok(GeneratedTarget {
            image: img(&r.image, "image")?,
            alpha: mask(alpha, "alpha")?,
        })
    }

    fn condition_generate(&self, features: &[RasterImage], prompt: &str, seed: u64, count: usize) -> BackendResult<Vec<RasterImage>> {
        let request_id = new_request_id();
        let r: ImagesResponse = self.call(
            "condition_generate",
            &ConditionGenerateRequest {
                request_id: request_id.clone(),
                features: images(features),
                prompt: prompt.into(),
                seed,
                count,
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        r.images.iter().map(|b| img(b, "images")).collect()
    }

    fn inpaint(&self, model: &ModelRef, canvas: &RasterImage, m: &BitMask, prompt: &str, seed: u64) -> BackendResult<RasterImage> {
        let request_id = new_request_id();
        let r: ImageResponse = self.call(
            "inpaint",
            &InpaintRequest {
                request_id: request_id.clone(),
                model_ref: model.clone(),
                canvas: encode_image(canvas),
                mask: encode_image(&m.to_image()),
                prompt: prompt.into(),
                seed,
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        img(&r.image, "image")
    }
}

impl RemoteBackend {
    fn embed(&self, imgs: &[RasterImage], texts: &[String]) -> BackendResult<Vec<EmbeddingVector>> {
        let request_id = new_request_id();
        let r: EmbedResponse = self.call(
            "embed",
            &EmbedRequest {
                request_id: request_id.clone(),
                images: images(imgs),
                texts: texts.to_vec(),
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        if r.embeddings.len() != imgs.len() + texts.len() {
            return Err(BackendError::new("protocol_error", "embedding count mismatch", false));
        }
        Ok(r.embeddings)
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn embed_images(&self, images: &[RasterImage]) -> BackendResult<Vec<EmbeddingVector>> {
        self.embed(images, &[])
    }

    fn embed_texts(&self, texts: &[String]) -> BackendResult<Vec<EmbeddingVector>> {
        self.embed(&[], texts)
    }
}

impl SegmentationBackend for RemoteBackend {
    fn segment(&self, image: &RasterImage, targets: &[String]) -> BackendResult<Vec<RoleMask>> {
        let request_id = new_request_id();
        let r: SegmentResponse = self.call(
            "segment",
            &SegmentRequest {
                request_id: request_id.clone(),
                image: encode_image(image),
                targets: targets.to_vec(),
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        r.masks
            .iter()
            .map(|m| {
                Ok(RoleMask {
                    role: m.role,
                    mask: mask(&m.mask, "masks")?,
                    confidence: m.confidence,
                })
            })
            .collect()
    }
}

fn examples(v: &[TrainingExample]) -> Vec<WireExample> {
    v.iter()
        .map(|e| WireExample {
            image: encode_image(&e.image),
            target: e.target.clone(),
        })
        .collect()
}

impl TrainingBackend for RemoteBackend {
    fn train(
        &self,
        task: TaskKind,
        classes: &[String],
        train: &[TrainingExample],
        validation: &[TrainingExample],
        config: &TrainConfig,
    ) -> BackendResult<TrainOutcome> {
        let request_id = new_request_id();
        let r: TrainResponse = self.call(
            "train",
            &TrainRequest {
                request_id: request_id.clone(),
                task,
                classes: classes.to_vec(),
                train: examples(train),
                validation: examples(validation),
                config: config.clone(),
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        Ok(TrainOutcome {
            initial: r.initial,
            epochs: r.epochs,
        })
    }

    fn predict(&self, model: &ModelRef, imgs: &[RasterImage]) -> BackendResult<Vec<Prediction>> {
        let request_id = new_request_id();
        let r: PredictResponse = self.call(
            "predict",
            &PredictRequest {
                request_id: request_id.clone(),
                model_ref: model.clone(),
                images: images(imgs),
            },
        )?;
        check_id(&request_id, &r.request_id)?;
        Ok(r.predictions)
    }
}

impl FeatureService for RemoteBackend {
    fn extract(&self, kind: FeatureKind, segment: &RasterImage) -> privsynth_core::Result<RasterImage> {
        let request_id = new_request_id();
        let r: ImageResponse = self
            .call(
                "features",
                &FeaturesRequest {
                    request_id: request_id.clone(),
                    kind,
                    image: encode_image(segment),
                },
            )
            .and_then(|r: ImageResponse| check_id(&request_id, &r.request_id).map(|_| r))
            .map_err(backend_to_core)?;
        decode_image(&r.image, "image").map_err(|e| privsynth_core::Error::BackendUnavailable(e.to_string()))
    }
}

impl ModelBackend for RemoteBackend {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        let resp = self
            .agent
            .get(&self.url("capabilities"))
            .call()
            .map_err(|e| BackendError::unavailable(format!("capabilities: {e}")))?;
        self.finish(resp)
    }
}
