//! Backend selection and the global in-flight cap.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use privsynth_core::backend::{
    BackendError, BackendResult, Capabilities, EmbeddingBackend, FineTuneConfig, GeneratedTarget,
    GenerationBackend, ModelRef, Prediction, SegmentationBackend, TrainConfig, TrainOutcome,
    TrainingBackend, TrainingExample,
};
use privsynth_core::imaging::{BitMask, RasterImage};
use privsynth_core::metrics::EmbeddingVector;
use privsynth_core::mock::MockBackend;
use privsynth_core::sanitizer::{FeatureKind, FeatureService, RoleMask, SegmentRole, TaskKind};

use crate::remote::RemoteBackend;

/// Everything the pipeline needs from a model server.
pub trait ModelBackend:
    GenerationBackend + EmbeddingBackend + SegmentationBackend + TrainingBackend + FeatureService + Send + Sync
{
    fn capabilities(&self) -> BackendResult<Capabilities>;
}

impl ModelBackend for MockBackend {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        Ok(MockBackend::capabilities(self))
    }
}

pub type SharedBackend = Arc<dyn ModelBackend>;

/// `mock` or an `http(s)://` base URL of a server exposing `/v1/backend/*`.
pub fn connect(spec: &str, timeout: Duration) -> crate::Result<SharedBackend> {
    match spec.trim() {
        "mock" => Ok(Arc::new(MockBackend::default())),
        url if url.starts_with("http://") || url.starts_with("https://") => {
            Ok(Arc::new(RemoteBackend::new(url, timeout)))
        }
        other => Err(crate::Error::Config(format!(
            "backend must be `mock` or an http(s) URL, got {other:?}"
        ))),
    }
}

/// Counting semaphore.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.cv.wait_while(self.free.lock().unwrap(), |n| *n == 0).unwrap();
            *free -= 1;
        }
        struct Release<'a>(&'a Limiter);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                *self.0.free.lock().unwrap() += 1;
                self.0.cv.notify_one();
            }
        }
        let _r = Release(self);
        f()
    }
}

/// Caps concurrent calls into `inner` across every user of the same limiter.
pub struct Throttled {
    inner: SharedBackend,
    limiter: Arc<Limiter>,
}

impl Throttled {
    pub fn new(inner: SharedBackend, limiter: Arc<Limiter>) -> Self {
        Self { inner, limiter }
    }
}

impl GenerationBackend for Throttled {
    fn fine_tune(&self, role: SegmentRole, refs: &[RasterImage], config: &FineTuneConfig) -> BackendResult<ModelRef> {
        self.limiter.run(|| self.inner.fine_tune(role, refs, config))
    }

    fn generate(&self, model: &ModelRef, prompt: &str, seed: u64, w: u32, h: u32) -> BackendResult<GeneratedTarget> {
        self.limiter.run(|| self.inner.generate(model, prompt, seed, w, h))
    }

    fn condition_generate(&self, f: &[RasterImage], prompt: &str, seed: u64, count: usize) -> BackendResult<Vec<RasterImage>> {
        self.limiter.run(|| self.inner.condition_generate(f, prompt, seed, count))
    }

    fn inpaint(&self, model: &ModelRef, canvas: &RasterImage, mask: &BitMask, prompt: &str, seed: u64) -> BackendResult<RasterImage> {
        self.limiter.run(|| self.inner.inpaint(model, canvas, mask, prompt, seed))
    }
}

impl EmbeddingBackend for Throttled {
    fn embed_images(&self, images: &[RasterImage]) -> BackendResult<Vec<EmbeddingVector>> {
        self.limiter.run(|| self.inner.embed_images(images))
    }

    fn embed_texts(&self, texts: &[String]) -> BackendResult<Vec<EmbeddingVector>> {
        self.limiter.run(|| self.inner.embed_texts(texts))
    }
}

impl SegmentationBackend for Throttled {
    fn segment(&self, image: &RasterImage, targets: &[String]) -> BackendResult<Vec<RoleMask>> {
        self.limiter.run(|| self.inner.segment(image, targets))
    }
}

impl TrainingBackend for Throttled {
    fn train(
        &self,
        task: TaskKind,
        classes: &[String],
        train: &[TrainingExample],
        validation: &[TrainingExample],
        config: &TrainConfig,
    ) -> BackendResult<TrainOutcome> {
        self.limiter.run(|| self.inner.train(task, classes, train, validation, config))
    }

    fn predict(&self, model: &ModelRef, images: &[RasterImage]) -> BackendResult<Vec<Prediction>> {
        self.limiter.run(|| self.inner.predict(model, images))
    }
}

impl FeatureService for Throttled {
    fn extract(&self, kind: FeatureKind, segment: &RasterImage) -> privsynth_core::Result<RasterImage> {
        self.limiter.run(|| self.inner.extract(kind, segment))
    }
}

impl ModelBackend for Throttled {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.inner.capabilities()
    }
}

/// Maps a core error raised inside a backend to the wire envelope.
pub fn core_to_backend(e: privsynth_core::Error) -> BackendError {
    let retryable = matches!(e, privsynth_core::Error::BackendUnavailable(_));
    BackendError::new(e.code(), e.to_string(), retryable)
}

/// Inverse of [`core_to_backend`] for the feature endpoint.
pub fn backend_to_core(e: BackendError) -> privsynth_core::Error {
    match e.code.as_str() {
        "unsupported_feature" => privsynth_core::Error::UnsupportedFeature(e.message),
        "invalid_argument" => privsynth_core::Error::InvalidArgument(e.message),
        _ => privsynth_core::Error::BackendUnavailable(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn limiter_caps_concurrency() {
        let limiter = Limiter::new(3);
        let (now, peak) = (AtomicUsize::new(0), AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| {
                    limiter.run(|| {
                        let n = now.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(n, Ordering::SeqCst);
                        std::thread::sleep(Duration::from_millis(5));
                        now.fetch_sub(1, Ordering::SeqCst);
                    })
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(peak.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn connect_rejects_junk() {
        assert!(connect("mock", Duration::from_secs(1)).is_ok());
        assert_eq!(connect("ftp://x", Duration::from_secs(1)).err().unwrap().code(), "config_error");
    }
}
