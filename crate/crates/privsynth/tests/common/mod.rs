#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use privsynth::files;
use privsynth::pngio;
use privsynth_core::imaging::{BitMask, PixelFormat, RasterImage};
use privsynth_core::sanitizer::{ManifestEntry, RoleMask, SegmentRole, TaskKind, UserRequest};

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
}

/// Serves `app` on an ephemeral port of `rt`.
pub fn serve_in(rt: &tokio::runtime::Runtime, app: axum::Router) -> SocketAddr {
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

/// Serves `app` on an ephemeral port from a background runtime.
pub fn serve(app: axum::Router) -> (SocketAddr, tokio::runtime::Runtime) {
    let rt = runtime();
    let addr = serve_in(&rt, app);
    (addr, rt)
}

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

/// Shaded, textured background with a textured blob as the target.
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

pub struct Fixture {
    pub request: PathBuf,
    pub images: PathBuf,
    pub manifest: PathBuf,
}

/// Writes a request, `n` reference images and their segmentation manifest under `dir`.
pub fn write_fixture(dir: &Path, n: u32, size: u32) -> Fixture {
    let f = Fixture {
        request: dir.join("request.json"),
        images: dir.join("images"),
        manifest: dir.join("seg").join("manifest.json"),
    };
    files::write_json(&f.request, &husky_request()).unwrap();
    let (images, entries) = corpus(n, size);
    std::fs::create_dir_all(&f.images).unwrap();
    for (img, e) in images.iter().zip(&entries) {
        pngio::write(&f.images.join(&e.image), img).unwrap();
    }
    files::write_manifest(&f.manifest, &entries).unwrap();
    f
}

/// Every regular file under `dir`, recursively, sorted.
pub fn all_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
