//! Deterministic procedural stand-in for every backend.
//!
//! Nothing here is learned. Generation paints sinusoid textures keyed by the
//! prompt and seed; a "fine-tuned" model is the colour statistics of its
//! references, encoded into the model ref itself so the backend stays
//! stateless. Embeddings are colour histograms. Training is nearest class mean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backend::{
    BackendError, BackendResult, Capabilities, EmbeddingBackend, EpochResult, FineTuneConfig,
    GeneratedTarget, GenerationBackend, ModelRef, Prediction, SegmentationBackend, TrainConfig,
    TrainOutcome, TrainingBackend, TrainingExample, TrainingTarget,
};
use crate::error::{Error, Result};
use crate::imaging::{BitMask, PixelFormat, RasterImage};
use crate::metrics::EmbeddingVector;
use crate::sanitizer::{FeatureKind, FeatureService, RoleMask, SegmentRole, TaskKind};
use crate::seed::{derive_seed, hash_str};
use crate::utility::{map50, BBox, Detection};

pub const EMBEDDING_PROVIDER: &str = "mock-hist-v1";
const FT_PREFIX: &str = "mock-ft:";
const NCM_PREFIX: &str = "mock-ncm:";
const DET_PREFIX: &str = "mock-det:";
const PALETTE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockBackend {
    /// Weight of reference statistics in fine-tuned output.
    pub blend: f64,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self { blend: 0.7 }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn rgb(px: &[u8]) -> [u8; 3] {
    match px.len() {
        1 => [px[0]; 3],
        _ => [px[0], px[1], px[2]],
    }
}

fn nonzero_rgb(img: &RasterImage) -> impl Iterator<Item = [u8; 3]> + '_ {
    img.pixels().filter(|p| p.iter().any(|&v| v != 0)).map(rgb)
}

/// Colour statistics a fine-tuned model carries.
#[derive(Debug, Clone, PartialEq)]
struct RefStats {
    std: [u8; 3],
    /// Most frequent coarse colours with their weights (sum 255-ish), heaviest first.
    palette: Vec<([u8; 3], u8)>,
}

impl RefStats {
    fn of(images: &[RasterImage]) -> Option<Self> {
        let mut n = 0f64;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        // 4 bits per channel buckets: (count, channel sums)
        let mut buckets = vec![(0u64, [0u64; 3]); 4096];
        for img in images {
            for p in nonzero_rgb(img) {
                n += 1.0;
                for c in 0..3 {
                    sum[c] += p[c] as f64;
                    sq[c] += (p[c] as f64) * (p[c] as f64);
                }
                let k = ((p[0] as usize >> 4) << 8) | ((p[1] as usize >> 4) << 4) | (p[2] as usize >> 4);
                buckets[k].0 += 1;
                for c in 0..3 {
                    buckets[k].1[c] += p[c] as u64;
                }
            }
        }
        if n == 0.0 {
            return None;
        }
        let mut std = [0u8; 3];
        for c in 0..3 {
            let m = sum[c] / n;
            std[c] = libm::sqrt((sq[c] / n - m * m).max(0.0)).min(255.0) as u8;
        }
        let mut order: Vec<usize> = (0..buckets.len()).filter(|&k| buckets[k].0 > 0).collect();
        order.sort_by(|&a, &b| buckets[b].0.cmp(&buckets[a].0).then(a.cmp(&b)));
        order.truncate(PALETTE);
        let total: u64 = order.iter().map(|&k| buckets[k].0).sum();
        let palette = order
            .iter()
            .map(|&k| {
                let (cnt, s) = buckets[k];
                let colour = [(s[0] / cnt) as u8, (s[1] / cnt) as u8, (s[2] / cnt) as u8];
                (colour, ((cnt * 255) / total).max(1) as u8)
            })
            .collect();
        Some(Self { std, palette })
    }

    fn encode(&self) -> String {
        let mut bytes = self.std.to_vec();
        for (c, w) in &self.palette {
            bytes.extend_from_slice(c);
            bytes.push(*w);
        }
        hex(&bytes)
    }

    fn decode(s: &str) -> Option<Self> {
        let b = unhex(s)?;
        if b.len() < 7 || (b.len() - 3) % 4 != 0 {
            return None;
        }
        let palette = b[3..]
            .chunks_exact(4)
            .map(|c| ([c[0], c[1], c[2]], c[3]))
            .collect();
        Some(Self {
            std: [b[0], b[1], b[2]],
            palette,
        })
    }

    fn colour_at(&self, v: f64) -> [f64; 3] {
        let total: f64 = self.palette.iter().map(|p| p.1 as f64).sum();
        let mut acc = 0.0;
        let mut pick = self.palette[self.palette.len() - 1].0;
        for (c, w) in &self.palette {
            acc += *w as f64 / total;
            if v < acc {
                pick = *c;
                break;
            }
        }
        let t = v * 7.0;
        let wobble = t - libm::floor(t) - 0.5;
        [0, 1, 2].map(|c| pick[c] as f64 + wobble * self.std[c] as f64 * 0.5)
    }
}

/// Procedural texture parameters for (prompt, seed).
struct Texture {
    base: [f64; 3],
    freq: [f64; 2],
    phase: [f64; 2],
}

impl Texture {
    fn new(prompt: &str, seed: u64) -> Self {
        let h = hash_str(prompt);
        let s = derive_seed(h, &[seed]);
        let base = [0, 1, 2].map(|c| 60.0 + ((h >> (8 * c)) & 0xff) as f64 * 0.55);
        let unit = |k: u32| ((s >> k) & 0xffff) as f64 / 65535.0;
        Self {
            base,
            freq: [0.05 + 0.25 * unit(0), 0.05 + 0.25 * unit(16)],
            phase: [core::f64::consts::TAU * unit(32), core::f64::consts::TAU * unit(48)],
        }
    }

    /// Scalar field in [0, 1).
    fn value(&self, x: u32, y: u32) -> f64 {
        let a = libm::sin(self.freq[0] * x as f64 + self.phase[0]);
        let b = libm::sin(self.freq[1] * y as f64 + self.phase[1] + 0.5 * a);
        ((a + b) / 4.0 + 0.5).clamp(0.0, 0.999_999)
    }

    fn colour(&self, v: f64) -> [f64; 3] {
        [0, 1, 2].map(|c| self.base[c] + 80.0 * (v - 0.5) * [1.0, -0.6, 0.4][c])
    }
}

fn to_px(c: [f64; 3]) -> [u8; 4] {
    let q = |v: f64| libm::round(v).clamp(1.0, 255.0) as u8;
    [q(c[0]), q(c[1]), q(c[2]), 255]
}

fn parse_model(model: &ModelRef) -> BackendResult<Option<RefStats>> {
    if model.is_pretrained() {
        return Ok(None);
    }
    let body = model
        .as_str()
        .strip_prefix(FT_PREFIX)
        .and_then(|s| s.split_once(':'))
        .map(|(_, stats)| stats)
        .ok_or_else(|| BackendError::invalid(format!("unknown model {:?}", model.as_str())))?;
    RefStats::decode(body)
        .map(Some)
        .ok_or_else(|| BackendError::invalid("corrupt model ref"))
}

impl MockBackend {
    fn paint(&self, stats: Option<&RefStats>, prompt: &str, seed: u64, w: u32, h: u32) -> RasterImage {
        let tex = Texture::new(prompt, seed);
        RasterImage::from_fn(w, h, PixelFormat::Rgb8, |x, y| {
            let v = tex.value(x, y);
            let p = tex.colour(v);
            match stats {
                None => to_px(p),
                Some(s) => {
                    let r = s.colour_at(v);
                    to_px([0, 1, 2].map(|c| (1.0 - self.blend) * p[c] + self.blend * r[c]))
                }
            }
        })
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            provider: "mock".into(),
            deterministic: true,
            returns_alpha: true,
            endpoints: [
                "fine_tune",
                "generate",
                "condition_generate",
                "inpaint",
                "embed",
                "segment",
                "features",
                "train",
                "predict",
            ]
            .map(String::from)
            .to_vec(),
            features: vec!["canny".into(), "layout_box".into()],
        }
    }
}

impl GenerationBackend for MockBackend {
    fn fine_tune(&self, role: SegmentRole, references: &[RasterImage], _config: &FineTuneConfig) -> BackendResult<ModelRef> {
        let stats = RefStats::of(references)
            .ok_or_else(|| BackendError::invalid("references carry no non-zero pixels"))?;
        Ok(ModelRef(format!("{FT_PREFIX}{role}:{}", stats.encode())))
    }

    fn generate(&self, model: &ModelRef, prompt: &str, seed: u64, width: u32, height: u32) -> BackendResult<GeneratedTarget> {
        if width == 0 || height == 0 {
            return Err(BackendError::invalid("empty canvas"));
        }
        let stats = parse_model(model)?;
        let image = self.paint(stats.as_ref(), prompt, seed, width, height);
        let s = derive_seed(seed, &[hash_str(prompt), 1]);
        let rx = 0.25 + 0.2 * ((s & 0xff) as f64 / 255.0);
        let ry = 0.25 + 0.2 * (((s >> 8) & 0xff) as f64 / 255.0);
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let alpha = BitMask::from_fn(width, height, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / (rx * width as f64);
            let dy = (y as f64 + 0.5 - cy) / (ry * height as f64);
            dx * dx + dy * dy <= 1.0
        });
        Ok(GeneratedTarget { image, alpha })
    }

    fn condition_generate(&self, features: &[RasterImage], prompt: &str, seed: u64, count: usize) -> BackendResult<Vec<RasterImage>> {
        if features.is_empty() && count > 0 {
            return Err(BackendError::invalid("no feature images"));
        }
        Ok((0..count)
            .map(|i| {
                let f = &features[i % features.len()];
                let mut img = self.paint(None, prompt, derive_seed(seed, &[i as u64]), f.width(), f.height());
                for (y, x) in (0..f.height()).flat_map(|y| (0..f.width()).map(move |x| (y, x))) {
                    if f.pixel(x, y).iter().any(|&v| v != 0) {
                        img.pixel_mut(x, y).copy_from_slice(&[24, 24, 24]);
                    }
                }
                img
            })
            .collect())
    }

    fn inpaint(&self, model: &ModelRef, canvas: &RasterImage, mask: &BitMask, prompt: &str, seed: u64) -> BackendResult<RasterImage> {
        if canvas.dimensions() != mask.dimensions() {
            return Err(BackendError::invalid("mask and canvas differ in size"));
        }
        let stats = parse_model(model)?;
        let fill = self.paint(stats.as_ref(), prompt, seed, canvas.width(), canvas.height());
        let mut out = canvas.convert(PixelFormat::Rgb8);
        for (y, x) in (0..canvas.height()).flat_map(|y| (0..canvas.width()).map(move |x| (y, x))) {
            if mask.get(x, y) {
                out.pixel_mut(x, y).copy_from_slice(fill.pixel(x, y));
            }
        }
        Ok(out)
    }
}

/// Square-root normalised 64-bin colour histogram over non-zero pixels.
/// Bins are soft: each channel votes for the four level centres with a
/// Gaussian weight, so nearby colours land in overlapping bins.
pub fn histogram_embedding(img: &RasterImage) -> EmbeddingVector {
    let mut bins = [0f64; 64];
    let mut n = 0f64;
    let weights = |v: u8| -> [f64; 4] {
        let w = [32.0, 96.0, 160.0, 224.0].map(|c: f64| {
            let d = (v as f64 - c) / 48.0;
            libm::exp(-0.5 * d * d)
        });
        let s: f64 = w.iter().sum();
        w.map(|x| x / s)
    };
    for p in nonzero_rgb(img) {
        let (r, g, b) = (weights(p[0]), weights(p[1]), weights(p[2]));
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    bins[i * 16 + j * 4 + k] += r[i] * g[j] * b[k];
                }
            }
        }
        n += 1.0;
    }
    let values = if n == 0.0 {
        vec![0.125; 64]
    } else {
        bins.iter().map(|c| libm::sqrt(c / n)).collect()
    };
    EmbeddingVector::new(EMBEDDING_PROVIDER, values)
}

/// Hashed bag of words on the same 64 bins, with a floor so every text
/// (including the empty prompt) has a non-zero embedding.
pub fn text_embedding(text: &str) -> EmbeddingVector {
    let mut bins = [0.05f64; 64];
    for w in text.split_whitespace() {
        bins[(hash_str(&w.to_lowercase()) % 64) as usize] += 1.0;
    }
    let norm = libm::sqrt(bins.iter().map(|v| v * v).sum::<f64>());
    EmbeddingVector::new(EMBEDDING_PROVIDER, bins.iter().map(|v| v / norm).collect())
}

impl EmbeddingBackend for MockBackend {
    fn embed_images(&self, images: &[RasterImage]) -> BackendResult<Vec<EmbeddingVector>> {
        Ok(images.iter().map(histogram_embedding).collect())
    }

    fn embed_texts(&self, texts: &[String]) -> BackendResult<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| text_embedding(t)).collect())
    }
}

impl SegmentationBackend for MockBackend {
    /// Foreground = pixels far from the mean border colour; with several
    /// targets the foreground is split into equal vertical strips.
    fn segment(&self, image: &RasterImage, targets: &[String]) -> BackendResult<Vec<RoleMask>> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(BackendError::invalid("empty image"));
        }
        let mut border = [0f64; 3];
        let mut n = 0f64;
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                    let p = rgb(image.pixel(x, y));
                    for c in 0..3 {
                        border[c] += p[c] as f64;
                    }
                    n += 1.0;
                }
            }
        }
        let border = border.map(|v| v / n);
        let dist: Vec<u16> = image
            .pixels()
            .map(|p| {
                let p = rgb(p);
                (0..3).map(|c| (p[c] as f64 - border[c]).abs()).sum::<f64>() as u16
            })
            .collect();
        let t = otsu(&dist).max(30);
        let fg = BitMask::from_fn(w, h, |x, y| dist[(y * w + x) as usize] > t);
        let k = targets.len().max(1) as u32;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let (lo, hi) = (w * i as u32 / k, w * (i as u32 + 1) / k);
                let mask = BitMask::from_fn(w, h, |x, y| x >= lo && x < hi && fg.get(x, y));
                let confidence = if mask.is_empty() { 0.0 } else { 0.9 };
                RoleMask {
                    role: SegmentRole::Target(i as u16),
                    mask,
                    confidence,
                }
            })
            .collect())
    }
}

/// Threshold maximising between-class variance of `values` (all < 766).
fn otsu(values: &[u16]) -> u16 {
    let mut hist = vec![0f64; 766];
    for &v in values {
        hist[v as usize] += 1.0;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * c).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0u16, -1.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c;
        sum0 += t as f64 * c;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = t as u16;
        }
    }
    best
}

impl FeatureService for MockBackend {
    fn extract(&self, kind: FeatureKind, segment: &RasterImage) -> Result<RasterImage> {
        match kind {
            FeatureKind::Canny => crate::imaging::canny_edges(segment, 50, 150),
            FeatureKind::LayoutBox => {
                let (w, h) = segment.dimensions();
                let rect = segment.nonzero_mask().bounding_rect();
                Ok(RasterImage::from_fn(w, h, PixelFormat::Gray8, |x, y| {
                    let inside = rect.is_some_and(|r| x >= r.x && y >= r.y && x < r.x + r.w && y < r.y + r.h);
                    [if inside { 255 } else { 0 }, 0, 0, 0]
                }))
            }
            FeatureKind::Pose => Err(Error::UnsupportedFeature("the mock backend has no pose extractor".into())),
        }
    }
}

/// 4x4 grid of mean RGB, 48 values in [0, 255].
fn grid_features(img: &RasterImage) -> [f64; 48] {
    let (w, h) = img.dimensions();
    let mut sum = [0f64; 48];
    let mut cnt = [0f64; 16];
    for y in 0..h {
        for x in 0..w {
            let cell = ((y * 4 / h.max(1)) * 4 + x * 4 / w.max(1)) as usize;
            let p = rgb(img.pixel(x, y));
            for c in 0..3 {
                sum[cell * 3 + c] += p[c] as f64;
            }
            cnt[cell] += 1.0;
        }
    }
    for i in 0..48 {
        if cnt[i / 3] > 0.0 {
            sum[i] /= cnt[i / 3];
        }
    }
    sum
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn encode_means(prefix: &str, means: &[Vec<f64>]) -> ModelRef {
    let bytes: Vec<u8> = means
        .iter()
        .flatten()
        .map(|v| libm::round(*v).clamp(0.0, 255.0) as u8)
        .collect();
    ModelRef(format!("{prefix}{}:{}", means.len(), hex(&bytes)))
}

fn decode_means(body: &str, dim: usize) -> BackendResult<Vec<Vec<f64>>> {
    let bad = || BackendError::invalid("corrupt model ref");
    let (k, data) = body.split_once(':').ok_or_else(bad)?;
    let k: usize = k.parse().map_err(|_| bad())?;
    let bytes = unhex(data).ok_or_else(bad)?;
    if bytes.len() != k * dim {
        return Err(bad());
    }
    Ok(bytes.chunks_exact(dim).map(|c| c.iter().map(|&b| b as f64).collect()).collect())
}

/// Mean colour of the pixels inside and outside the labelled boxes.
fn box_colours(ex: &TrainingExample, classes: usize, obj: &mut [Vec<f64>], bg: &mut [f64; 4]) {
    let TrainingTarget::Boxes(boxes) = &ex.target else { return };
    let (w, h) = ex.image.dimensions();
    for y in 0..h {
        for x in 0..w {
            let p = rgb(ex.image.pixel(x, y));
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = boxes.iter().find(|b| {
                fx >= b.bbox.x && fy >= b.bbox.y && fx < b.bbox.x + b.bbox.w && fy < b.bbox.y + b.bbox.h
            });
            let slot: &mut [f64] = match hit {
                Some(b) if (b.class_id as usize) < classes => &mut obj[b.class_id as usize],
                _ => &mut bg[..],
            };
            for c in 0..3 {
                slot[c] += p[c] as f64;
            }
            slot[3] += 1.0;
        }
    }
}

fn detect(means: &[Vec<f64>], img: &RasterImage) -> Vec<Detection> {
    // means[0] is the background, means[1..] the classes.
    let (w, h) = img.dimensions();
    let mut hits: Vec<Vec<(u32, u32)>> = vec![Vec::new(); means.len()];
    for y in 0..h {
        for x in 0..w {
            let p = rgb(img.pixel(x, y)).map(|v| v as f64);
            let best = (0..means.len())
                .min_by(|&a, &b| dist2(&p, &means[a]).total_cmp(&dist2(&p, &means[b])))
                .unwrap_or(0);
            hits[best].push((x, y));
        }
    }
    let mut out = Vec::new();
    for (k, px) in hits.iter().enumerate().skip(1) {
        if px.len() < 4 {
            continue;
        }
        // Trim 2% tails on each axis against stray pixels.
        let trim = |mut v: Vec<u32>| {
            v.sort_unstable();
            let t = v.len() / 50;
            (v[t], v[v.len() - 1 - t])
        };
        let (x0, x1) = trim(px.iter().map(|p| p.0).collect());
        let (y0, y1) = trim(px.iter().map(|p| p.1).collect());
        let bbox = BBox {
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        };
        let fill = px.len() as f64 / bbox.area();
        out.push(Detection {
            bbox,
            class_id: (k - 1) as u32,
            confidence: fill.clamp(0.01, 1.0),
        });
    }
    out
}

impl MockBackend {
    fn fit(&self, task: TaskKind, classes: usize, data: &[TrainingExample]) -> BackendResult<ModelRef> {
        match task {
            TaskKind::Classification => {
                let mut sums = vec![vec![0f64; 48]; classes];
                let mut counts = vec![0f64; classes];
                for ex in data {
                    let TrainingTarget::Class(c) = ex.target else {
                        return Err(BackendError::invalid("box target for a classifier"));
                    };
                    let c = c as usize;
                    if c >= classes {
                        return Err(BackendError::invalid(format!("class id {c} out of range")));
                    }
                    for (s, f) in sums[c].iter_mut().zip(grid_features(&ex.image)) {
                        *s += f;
                    }
                    counts[c] += 1.0;
                }
                let means: Vec<Vec<f64>> = sums
                    .into_iter()
                    .zip(counts)
                    .map(|(s, n)| if n > 0.0 { s.iter().map(|v| v / n).collect() } else { vec![128.0; 48] })
                    .collect();
                Ok(encode_means(NCM_PREFIX, &means))
            }
            TaskKind::Detection => {
                let mut obj = vec![vec![0f64; 4]; classes];
                let mut bg = [0f64; 4];
                for ex in data {
                    if let TrainingTarget::Class(_) = ex.target {
                        return Err(BackendError::invalid("class target for a detector"));
                    }
                    box_colours(ex, classes, &mut obj, &mut bg);
                }
                let avg = |s: &[f64]| -> Vec<f64> {
                    if s[3] > 0.0 {
                        (0..3).map(|c| s[c] / s[3]).collect()
                    } else {
                        vec![0.0; 3]
                    }
                };
                let mut means = vec![avg(&bg)];
                means.extend(obj.iter().map(|o| avg(o)));
                Ok(encode_means(DET_PREFIX, &means))
            }
        }
    }

    fn score(&self, model: &ModelRef, task: TaskKind, data: &[TrainingExample]) -> BackendResult<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let images: Vec<RasterImage> = data.iter().map(|e| e.image.clone()).collect();
        let preds = self.predict(model, &images)?;
        match task {
            TaskKind::Classification => {
                let hits = preds
                    .iter()
                    .zip(data)
                    .filter(|(p, e)| matches!((p, &e.target), (Prediction::Class { class_id, .. }, TrainingTarget::Class(c)) if class_id == c))
                    .count();
                Ok(hits as f64 / data.len() as f64)
            }
            TaskKind::Detection => {
                let dets: Vec<Vec<Detection>> = preds
                    .into_iter()
                    .map(|p| match p {
                        Prediction::Detections(d) => d,
                        Prediction::Class { .. } => Vec::new(),
                    })
                    .collect();
                let gt: Vec<_> = data
                    .iter()
                    .map(|e| match &e.target {
                        TrainingTarget::Boxes(b) => b.clone(),
                        TrainingTarget::Class(_) => Vec::new(),
                    })
                    .collect();
                Ok(map50(&dets, &gt).unwrap_or(0.0))
            }
        }
    }
}

impl TrainingBackend for MockBackend {
    /// Epoch `e` of `n` fits on the first `ceil(e/n)` fraction of the training set.
    fn train(
        &self,
        task: TaskKind,
        classes: &[String],
        train: &[TrainingExample],
        validation: &[TrainingExample],
        config: &TrainConfig,
    ) -> BackendResult<TrainOutcome> {
        if classes.is_empty() {
            return Err(BackendError::invalid("no classes"));
        }
        if train.is_empty() {
            return Err(BackendError::invalid("empty training set"));
        }
        let initial = self.fit(task, classes.len(), &[])?;
        let n = config.epochs.max(1) as usize;
        let mut epochs = Vec::new();
        for e in 1..=config.epochs {
            let take = (train.len() * e as usize).div_ceil(n);
            let model = self.fit(task, classes.len(), &train[..take])?;
            epochs.push(EpochResult {
                epoch: e,
                validation_score: self.score(&model, task, validation)?,
                model,
            });
        }
        Ok(TrainOutcome { initial, epochs })
    }

    fn predict(&self, model: &ModelRef, images: &[RasterImage]) -> BackendResult<Vec<Prediction>> {
        let s = model.as_str();
        if let Some(body) = s.strip_prefix(NCM_PREFIX) {
            let means = decode_means(body, 48)?;
            Ok(images
                .iter()
                .map(|img| {
                    let f = grid_features(img);
                    let d: Vec<f64> = means.iter().map(|m| dist2(&f, m)).collect();
                    let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
                    let inv: f64 = d.iter().map(|v| 1.0 / (1.0 + v)).sum();
                    Prediction::Class {
                        class_id: best as u32,
                        confidence: (1.0 / (1.0 + d[best])) / inv,
                    }
                })
                .collect())
        } else if let Some(body) = s.strip_prefix(DET_PREFIX) {
            let means = decode_means(body, 3)?;
            Ok(images.iter().map(|img| Prediction::Detections(detect(&means, img))).collect())
        } else {
            Err(BackendError::invalid(format!("unknown model {s:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{cosine, sim, SimPairing};
    use crate::testutil::scene;

    #[test]
    fn generation_is_deterministic() {
        let m = MockBackend::default();
        let a = m.generate(&ModelRef::pretrained(), "a dog is eating", 5, 40, 30).unwrap();
        let b = m.generate(&ModelRef::pretrained(), "a dog is eating", 5, 40, 30).unwrap();
        assert_eq!(a, b);
        let c = m.generate(&ModelRef::pretrained(), "a dog is eating", 6, 40, 30).unwrap();
        assert_ne!(a.image, c.image);
        assert!(!a.alpha.is_empty());
        assert_eq!(a.image.dimensions(), (40, 30));
    }

    #[test]
    fn model_ref_round_trip() {
        let (img, mask) = scene(32, 32, 1);
        let refs = [crate::imaging::apply_mask(&img, &mask).unwrap()];
        let m = MockBackend::default();
        let model = m.fine_tune(SegmentRole::Target(0), &refs, &FineTuneConfig::default()).unwrap();
        assert!(parse_model(&model).unwrap().is_some());
        assert!(m.generate(&ModelRef("bogus".into()), "x", 0, 4, 4).is_err());
        let empty = [RasterImage::zeros(4, 4, PixelFormat::Rgb8)];
        assert!(m.fine_tune(SegmentRole::Background, &empty, &FineTuneConfig::default()).is_err());
    }

    #[test]
    fn fine_tuning_moves_output_towards_references() {
        let m = MockBackend::default();
        let refs: Vec<RasterImage> = (0..5)
            .map(|i| {
                let (img, mask) = scene(48, 48, i);
                crate::imaging::apply_mask(&img, &mask).unwrap()
            })
            .collect();
        let ft = m.fine_tune(SegmentRole::Target(0), &refs, &FineTuneConfig::default()).unwrap();
        let private = m.embed_images(&refs).unwrap();
        let gen = |model: &ModelRef| -> Vec<EmbeddingVector> {
            (0..6)
                .map(|s| {
                    let g = m.generate(model, "a dog is eating", s, 48, 48).unwrap();
                    histogram_embedding(&crate::imaging::apply_mask(&g.image, &g.alpha).unwrap())
                })
                .collect()
        };
        let raw = sim(&private, &gen(&ft), SimPairing::AllPairs).unwrap();
        let pre = sim(&private, &gen(&ModelRef::pretrained()), SimPairing::AllPairs).unwrap();
        assert!(raw > pre, "{raw} vs {pre}");
    }

    #[test]
    fn inpaint_only_touches_mask() {
        let m = MockBackend::default();
        let canvas = RasterImage::filled(8, 8, PixelFormat::Rgb8, &[9, 9, 9]);
        let mask = BitMask::from_fn(8, 8, |x, _| x < 4);
        let out = m.inpaint(&ModelRef::pretrained(), &canvas, &mask, "bedroom", 1).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.pixel(x, y) == [9, 9, 9], x >= 4, "({x},{y})");
            }
        }
    }

    #[test]
    fn text_embeddings() {
        let e = text_embedding("");
        let d = text_embedding("a dog is eating");
        assert_eq!(cosine(&e, &e).unwrap(), 1.0);
        assert!(cosine(&e, &d).unwrap() < 1.0);
        assert_eq!(e.provider_id, histogram_embedding(&RasterImage::zeros(1, 1, PixelFormat::Gray8)).provider_id);
    }

    #[test]
    fn segmentation_finds_object() {
        let (img, mask) = scene(48, 48, 0);
        let m = MockBackend::default().segment(&img, &["dog".into()]).unwrap();
        assert_eq!(m.len(), 1);
        let inter = m[0].mask.intersection(&mask).unwrap().count() as f64;
        let union = m[0].mask.union(&mask).unwrap().count() as f64;
        assert!(inter / union > 0.8, "iou {}", inter / union);
    }

    #[test]
    fn features() {
        let m = MockBackend::default();
        let (img, mask) = scene(32, 32, 0);
        let seg = crate::imaging::apply_mask(&img, &mask).unwrap();
        let lb = m.extract(FeatureKind::LayoutBox, &seg).unwrap();
        assert_eq!(lb.nonzero_mask().bounding_rect(), mask.bounding_rect());
        assert_eq!(m.extract(FeatureKind::Pose, &seg).unwrap_err().code(), "unsupported_feature");
    }

    fn solid(c: [u8; 3]) -> RasterImage {
        RasterImage::filled(8, 8, PixelFormat::Rgb8, &c)
    }

    #[test]
    fn nearest_class_mean_learns_colours() {
        let m = MockBackend::default();
        let classes = [String::from("red"), String::from("blue")];
        let ex = |c, id| TrainingExample {
            image: solid(c),
            target: TrainingTarget::Class(id),
        };
        let train = [ex([250, 0, 0], 0), ex([0, 0, 250], 1), ex([240, 10, 0], 0), ex([0, 10, 240], 1)];
        let val = [ex([230, 5, 5], 0), ex([5, 5, 230], 1)];
        let out = m
            .train(TaskKind::Classification, &classes, &train, &val, &TrainConfig::for_task(TaskKind::Classification))
            .unwrap();
        assert_eq!(out.epochs.len(), 5);
        assert_eq!(out.epochs.last().unwrap().validation_score, 1.0);
        let p = m.predict(&out.epochs[4].model, &[solid([0, 0, 200])]).unwrap();
        assert!(matches!(p[0], Prediction::Class { class_id: 1, .. }));
    }
}
