//! Protocol conformance suite for `/v1/backend/*` servers. The mock passes
//! it in-process; `privsynth conformance --backend URL` runs it against any
//! other implementation.

use std::time::Duration;

use privsynth_core::backend::{
    EmbeddingBackend, FineTuneConfig, GenerationBackend, ModelRef, Prediction, SegmentationBackend,
    TrainConfig, TrainingBackend, TrainingExample, TrainingTarget,
};
use privsynth_core::imaging::{BitMask, PixelFormat, RasterImage};
use privsynth_core::sanitizer::{FeatureKind, FeatureService, SegmentRole, TaskKind};
use serde::Serialize;

use crate::backend::ModelBackend;
use crate::error::ErrorEnvelope;
use crate::protocol::{ENDPOINTS, PREFIX};
use crate::remote::RemoteBackend;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn scene(seed: u8) -> RasterImage {
    RasterImage::from_fn(48, 40, PixelFormat::Rgb8, |x, y| {
        let inside = (12..34).contains(&x) && (10..30).contains(&y);
        if inside {
            [200u8.wrapping_add(seed), (x * 3) as u8, 40, 0]
        } else {
            [30, 90u8.wrapping_add((y * 2) as u8), 160u8.wrapping_sub(seed), 0]
        }
    })
}

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_check(out: &mut Vec<Check>, name: &'static str, f: impl FnOnce() -> Outcome) {
    let (passed, detail) = match f() {
        Ok(()) => (true, String::new()),
        Err(d) => (false, d),
    };
    out.push(Check { name, passed, detail });
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Posts a raw body and expects a non-2xx response with a well-formed error envelope.
fn expect_envelope(agent: &ureq::Agent, url: &str, body: &[u8]) -> Outcome {
    let mut resp = agent
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .map_err(s)?;
    let status = resp.status().as_u16();
    ensure(!(200..300).contains(&status), || format!("expected an error status, got {status}"))?;
    let bytes = resp.body_mut().read_to_vec().map_err(s)?;
    let env: ErrorEnvelope =
        serde_json::from_slice(&bytes).map_err(|e| format!("HTTP {status}: no error envelope ({e})"))?;
    ensure(!env.code.is_empty() && !env.message.is_empty(), || "empty code or message".into())
}

pub fn run(base_url: &str, timeout: Duration) -> Vec<Check> {
    let b = RemoteBackend::new(base_url, timeout);
    let base = base_url.trim_end_matches('/');
    let mut out = Vec::new();

    let caps = b.capabilities();
    run_check(&mut out, "capabilities", || {
        let c = caps.as_ref().map_err(s)?;
        ensure(!c.provider.is_empty(), || "empty provider".into())?;
        let missing: Vec<_> = ENDPOINTS
            .iter()
            .filter(|e| **e != "features" && !c.endpoints.iter().any(|x| x == *e))
            .collect();
        ensure(missing.is_empty(), || format!("endpoints not advertised: {missing:?}"))
    });
    let deterministic = caps.as_ref().map(|c| c.deterministic).unwrap_or(true);
    let features: Vec<String> = caps.as_ref().map(|c| c.features.clone()).unwrap_or_default();

    let refs = [scene(0), scene(9)];
    let mut tuned = None;
    run_check(&mut out, "fine_tune", || {
        let m = b.fine_tune(SegmentRole::Target(0), &refs, &FineTuneConfig::default()).map_err(s)?;
        ensure(!m.as_str().is_empty() && !m.is_pretrained(), || format!("bad model ref {m:?}"))?;
        tuned = Some(m);
        Ok(())
    });

    run_check(&mut out, "generate_alpha", || {
        for model in [Some(ModelRef::pretrained()), tuned.clone()].into_iter().flatten() {
            let t = b.generate(&model, "a dog", 7, 40, 32).map_err(s)?;
            ensure(t.image.dimensions() == (40, 32), || format!("image is {:?}", t.image.dimensions()))?;
            ensure(t.alpha.dimensions() == (40, 32), || "alpha size differs from image".into())?;
            ensure(!t.alpha.is_empty(), || "empty alpha mask".into())?;
        }
        Ok(())
    });

    run_check(&mut out, "generate_determinism_flag", || {
        let a = b.generate(&ModelRef::pretrained(), "a dog", 11, 32, 32).map_err(s)?;
        let c = b.generate(&ModelRef::pretrained(), "a dog", 11, 32, 32).map_err(s)?;
        ensure(!deterministic || a == c, || "declared deterministic but outputs differ".into())
    });

    run_check(&mut out, "condition_generate", || {
        let edges = RasterImage::from_fn(48, 40, PixelFormat::Gray8, |x, _| [if x == 20 { 255 } else { 0 }, 0, 0, 0]);
        let imgs = b.condition_generate(&[edges], "a dog", 3, 3).map_err(s)?;
        ensure(imgs.len() == 3, || format!("asked for 3, got {}", imgs.len()))?;
        ensure(imgs.iter().all(|i| i.dimensions() == (48, 40)), || "wrong image size".into())
    });

    run_check(&mut out, "inpaint", || {
        let canvas = scene(3);
        let mask = BitMask::from_fn(48, 40, |x, _| x < 16);
        let a = b.inpaint(&ModelRef::pretrained(), &canvas, &mask, "bedroom", 5).map_err(s)?;
        ensure(a.dimensions() == canvas.dimensions(), || "size changed".into())?;
        let kept = (0..40).all(|y| (16..48).all(|x| a.pixel(x, y)[..3] == canvas.pixel(x, y)[..3]));
        ensure(kept, || "pixels outside the mask changed".into())?;
        let again = b.inpaint(&ModelRef::pretrained(), &canvas, &mask, "bedroom", 5).map_err(s)?;
        ensure(!deterministic || a == again, || "declared deterministic but outputs differ".into())
    });

    run_check(&mut out, "embed", || {
        let e = b.embed_images(&refs).map_err(s)?;
        ensure(e.len() == 2, || format!("2 images gave {} embeddings", e.len()))?;
        ensure(e[0].dimension() > 0 && e[0].provider_id == e[1].provider_id, || "inconsistent embeddings".into())?;
        let t1 = b.embed_texts(&[String::new(), "a dog".into()]).map_err(s)?;
        let t2 = b.embed_texts(&[String::new()]).map_err(s)?;
        ensure(t1.len() == 2, || "text count mismatch".into())?;
        ensure(t1[0] == t2[0], || "empty-prompt baseline is not stable".into())
    });

    run_check(&mut out, "segment", || {
        let masks = b.segment(&scene(1), &["dog".into()]).map_err(s)?;
        ensure(masks.len() == 1, || format!("1 target gave {} masks", masks.len()))?;
        let m = &masks[0];
        ensure(m.role == SegmentRole::Target(0), || format!("role {}", m.role))?;
        ensure(m.mask.dimensions() == (48, 40), || "mask size differs".into())?;
        ensure((0.0..=1.0).contains(&m.confidence), || "confidence outside [0, 1]".into())
    });

    run_check(&mut out, "features", || {
        caps.as_ref().map_err(s)?;
        for f in &features {
            let kind: FeatureKind = f.parse().map_err(s)?;
            let img = b.extract(kind, &scene(2)).map_err(s)?;
            ensure(img.dimensions() == (48, 40), || format!("{f}: wrong size"))?;
        }
        Ok(())
    });

    run_check(&mut out, "train_predict", || {
        let ex = |c: u32, seed: u8| TrainingExample {
            image: RasterImage::filled(16, 16, PixelFormat::Rgb8, &[if c == 0 { 20 } else { 230 }, seed, 90]),
            target: TrainingTarget::Class(c),
        };
        let train: Vec<_> = (0..8).map(|i| ex(i % 2, i as u8)).collect();
        let val: Vec<_> = (0..4).map(|i| ex(i % 2, 50 + i as u8)).collect();
        let mut cfg = TrainConfig::for_task(TaskKind::Classification);
        cfg.epochs = 2;
        let outcome = b
            .train(TaskKind::Classification, &["a".into(), "b".into()], &train, &val, &cfg)
            .map_err(s)?;
        ensure(outcome.epochs.len() == 2, || format!("{} epoch results for 2 epochs", outcome.epochs.len()))?;
        ensure(
            outcome.epochs.iter().all(|e| (0.0..=1.0).contains(&e.validation_score)),
            || "validation score outside [0, 1]".into(),
        )?;
        let images: Vec<_> = val.iter().map(|e| e.image.clone()).collect();
        let preds = b.predict(&outcome.epochs[1].model, &images).map_err(s)?;
        ensure(preds.len() == images.len(), || "one prediction per image expected".into())?;
        ensure(
            preds.iter().all(|p| matches!(p, Prediction::Class { confidence, .. } if (0.0..=1.0).contains(confidence))),
            || "malformed class prediction".into(),
        )
    });

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into();
    run_check(&mut out, "error_envelope_malformed", || {
        expect_envelope(&agent, &format!("{base}{PREFIX}/generate"), b"{not json")
    });
    run_check(&mut out, "error_envelope_backend", || {
        let body = serde_json::json!({
            "request_id": "conformance", "model_ref": "pretrained", "prompt": "x",
            "seed": 0, "width": 0, "height": 0, "want_alpha": true
        });
        expect_envelope(&agent, &format!("{base}{PREFIX}/generate"), body.to_string().as_bytes())
    });
    out
}
