#![allow(dead_code)]

use privsynth_core::imaging::{BitMask, PixelFormat, RasterImage};
use privsynth_core::sanitizer::{
    build_bundle, ManifestEntry, RoleMask, SanitizedBundle, SanitizerOptions, SegmentRole, TaskKind,
    UserRequest,
};

pub fn husky_request() -> UserRequest {
    UserRequest {
        target_objects: vec!["dog".into()],
        background: "bedroom".into(),
        training_objective: "A ML model detects my dog's status".into(),
        label_classes: ["eating", "sitting", "sleeping", "playing"].map(String::from).to_vec(),
        task_kind: TaskKind::Classification,
        prompt_template: None,
    }
}

/// Small deterministic xorshift so scenes do not depend on any RNG crate.
struct Xs(u64);

impl Xs {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Natural-looking scene: smooth shaded background with low-frequency
/// texture and a blob-shaped object with its own shading and texture.
pub fn natural_scene(size: u32, seed: u64) -> (RasterImage, BitMask) {
    let mut r = Xs(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1);
    for _ in 0..4 {
        r.next();
    }
    let s = size as f64;
    let (cx, cy) = (s * (0.35 + 0.3 * r.unit()), s * (0.35 + 0.3 * r.unit()));
    let (rx, ry) = (s * (0.15 + 0.12 * r.unit()), s * (0.15 + 0.12 * r.unit()));
    let wob = r.unit() * 6.0;
    let bg = [40.0 + 120.0 * r.unit(), 40.0 + 120.0 * r.unit(), 40.0 + 120.0 * r.unit()];
    let fg = [60.0 + 180.0 * r.unit(), 30.0 + 150.0 * r.unit(), 20.0 + 120.0 * r.unit()];
    let (fx, fy) = (0.05 + 0.3 * r.unit(), 0.05 + 0.3 * r.unit());
    let mask = BitMask::from_fn(size, size, |x, y| {
        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
        let a = dy.atan2(dx);
        dx * dx + dy * dy <= (1.0 + 0.15 * (3.0 * a + wob).sin()).powi(2)
    });
    let img = RasterImage::from_fn(size, size, PixelFormat::Rgb8, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let shade = 0.75 + 0.25 * (yf / s);
        let tex = 18.0 * (fx * xf).sin() * (fy * yf).cos();
        let base = if mask.get(x, y) { fg } else { bg };
        let mut px = [0u8; 4];
        for c in 0..3 {
            px[c] = (base[c] * shade + tex * (1.0 + c as f64 * 0.3)).round().clamp(0.0, 255.0) as u8;
        }
        px
    });
    (img, mask)
}

pub fn corpus(n: u32, size: u32) -> (Vec<RasterImage>, Vec<ManifestEntry>) {
    (0..n)
        .map(|i| {
            let (img, mask) = natural_scene(size, i as u64 + 1);
            let entry = ManifestEntry {
                image: format!("img{i:03}.png"),
                masks: vec![RoleMask {
                    role: SegmentRole::Target(0),
                    mask,
                    confidence: 0.95,
                }],
            };
            (img, entry)
        })
        .unzip()
}

pub fn bundle(preference: &str, images: &[RasterImage], manifest: &[ManifestEntry]) -> SanitizedBundle {
    build_bundle(
        &husky_request(),
        images,
        manifest,
        &preference.parse().unwrap(),
        &SanitizerOptions::default(),
        None,
    )
    .unwrap()
}
