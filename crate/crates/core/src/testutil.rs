use alloc::vec;

use crate::imaging::{BitMask, PixelFormat, RasterImage};
use crate::sanitizer::{
    build_bundle, ManifestEntry, RoleMask, SanitizedBundle, SanitizerOptions, SegmentRole, TaskKind,
    UserRequest,
};

pub(crate) fn husky_request() -> UserRequest {
    UserRequest {
        target_objects: vec!["dog".into()],
        background: "bedroom".into(),
        training_objective: "A ML model detects my dog's status".into(),
        label_classes: vec![
            "eating".into(),
            "sitting".into(),
            "sleeping".into(),
            "playing".into(),
        ],
        task_kind: TaskKind::Classification,
        prompt_template: None,
    }
}

/// Smooth textured RGB scene with a brighter elliptical object in the middle.
pub(crate) fn scene(w: u32, h: u32, seed: u32) -> (RasterImage, BitMask) {
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let mask = BitMask::from_fn(w, h, |x, y| {
        let dx = (x as f64 - cx) / (w as f64 * 0.3);
        let dy = (y as f64 - cy) / (h as f64 * 0.3);
        dx * dx + dy * dy <= 1.0
    });
    let img = RasterImage::from_fn(w, h, PixelFormat::Rgb8, |x, y| {
        let t = (x * 7 + y * 13 + seed * 31) % 97;
        if mask.get(x, y) {
            [(150 + t) as u8, (120 + t / 2) as u8, 60, 0]
        } else {
            [(20 + t) as u8, (40 + (x + seed) % 50) as u8, (60 + y % 40) as u8, 0]
        }
    });
    (img, mask)
}

/// `n` husky-style scenes with their manifest.
pub(crate) fn corpus(n: u32, size: u32) -> (alloc::vec::Vec<RasterImage>, alloc::vec::Vec<ManifestEntry>) {
    (0..n)
        .map(|i| {
            let (img, mask) = scene(size, size, i);
            let entry = ManifestEntry {
                image: alloc::format!("img{i}.png"),
                masks: vec![RoleMask {
                    role: SegmentRole::Target(0),
                    mask,
                    confidence: 0.9,
                }],
            };
            (img, entry)
        })
        .unzip()
}

pub(crate) fn husky_bundle(preference: &str, n: u32, size: u32) -> SanitizedBundle {
    let (images, manifest) = corpus(n, size);
    build_bundle(
        &husky_request(),
        &images,
        &manifest,
        &preference.parse().unwrap(),
        &SanitizerOptions::default(),
        None,
    )
    .unwrap()
}
