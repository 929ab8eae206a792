//! Device-side sanitizer.
//!
//! Reference images are split into one full-canvas segment per role using an
//! externally produced segmentation, each segment is reduced according to the
//! role's sanitization level, and the results are collected into a
//! [`SanitizedBundle`], the only thing that leaves the device.

mod types;

pub use types::{
    FeatureKind, PrivacyPreference, SanitizationLevel, Scheme, SegmentRole, TaskKind, UserRequest,
};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    add_gaussian_noise, apply_mask, canny_edges_with, BitMask, CannyParams, NoiseParams,
    PixelFormat, RasterImage,
};
use crate::seed::derive_seed;

/// One role's mask from the external detector.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleMask {
    pub role: SegmentRole,
    pub mask: BitMask,
    pub confidence: f64,
}

/// Segmentation of one reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub masks: Vec<RoleMask>,
}

impl ManifestEntry {
    /// Resolves one mask per role of `request`. The background mask is always the
    /// complement of the union of target masks; a supplied background mask must agree.
    pub fn role_masks(
        &self,
        request: &UserRequest,
        width: u32,
        height: u32,
    ) -> Result<BTreeMap<SegmentRole, BitMask>> {
        let mut out = BTreeMap::new();
        let mut supplied_bg = None;
        for rm in &self.masks {
            if rm.mask.dimensions() != (width, height) {
                return Err(Error::invalid(format!(
                    "mask for role {} is {}x{}, image is {width}x{height}",
                    rm.role,
                    rm.mask.width(),
                    rm.mask.height()
                )));
            }
            if !(0.0..=1.0).contains(&rm.confidence) {
                return Err(Error::invalid(format!(
                    "confidence {} for role {} outside [0, 1]",
                    rm.confidence, rm.role
                )));
            }
            if !request.has_role(rm.role) {
                return Err(Error::InconsistentSegmentation(format!(
                    "mask for role {} not in request",
                    rm.role
                )));
            }
            match rm.role {
                SegmentRole::Background => supplied_bg = Some(&rm.mask),
                role => {
                    if out.insert(role, rm.mask.clone()).is_some() {
                        return Err(Error::InconsistentSegmentation(format!(
                            "duplicate mask for role {role}"
                        )));
                    }
                }
            }
        }
        let mut union = BitMask::empty(width, height);
        for role in request.roles() {
            if role == SegmentRole::Background {
                continue;
            }
            let m = out
                .get(&role)
                .ok_or(Error::IncompleteSegmentation { role })?;
            union = union.union(m)?;
        }
        let background = union.complement();
        if let Some(bg) = supplied_bg {
            if *bg != background {
                return Err(Error::InconsistentSegmentation(
                    "background mask is not the complement of the target masks".to_string(),
                ));
            }
        }
        out.insert(SegmentRole::Background, background);
        Ok(out)
    }
}

/// A role's full-size canvas (out-of-mask pixels zero) and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub role: SegmentRole,
    pub canvas: RasterImage,
    pub mask: BitMask,
}

/// Splits `img` into one segment per role of `request`.
pub fn split_segments(
    img: &RasterImage,
    entry: &ManifestEntry,
    request: &UserRequest,
) -> Result<Vec<Segment>> {
    let masks = entry.role_masks(request, img.width(), img.height())?;
    masks
        .into_iter()
        .map(|(role, mask)| {
            Ok(Segment {
                role,
                canvas: apply_mask(img, &mask)?,
                mask,
            })
        })
        .collect()
}

/// Source of feature images the device cannot compute natively (pose, layout box).
pub trait FeatureService {
    fn extract(&self, kind: FeatureKind, segment: &RasterImage) -> Result<RasterImage>;
}

/// Whether the noise modifier is applied before or after feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseOrder {
    #[default]
    BeforeFeatures,
    AfterFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SanitizerOptions {
    pub canny: CannyParams,
    pub noise_order: NoiseOrder,
    /// Base seed for per-image, per-role noise streams.
    pub seed: u64,
}

impl Default for SanitizerOptions {
    fn default() -> Self {
        Self {
            canny: CannyParams::default(),
            noise_order: NoiseOrder::BeforeFeatures,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    None,
    Feature(RasterImage),
    Raw(RasterImage),
}

impl Payload {
    pub fn image(&self) -> Option<&RasterImage> {
        match self {
            Payload::None => None,
            Payload::Feature(img) | Payload::Raw(img) => Some(img),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::None => "none",
            Payload::Feature(_) => "feature",
            Payload::Raw(_) => "raw",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanitizedSegment {
    pub role: SegmentRole,
    pub text: String,
    pub scheme_used: SanitizationLevel,
    pub payload: Payload,
}

/// Sanitized output for one reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleEntry {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub segments: Vec<SanitizedSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanitizedBundle {
    pub request: UserRequest,
    pub preference: PrivacyPreference,
    pub seed: u64,
    pub entries: Vec<BundleEntry>,
}

fn role_tag(role: SegmentRole) -> u64 {
    match role {
        SegmentRole::Target(i) => i as u64,
        SegmentRole::Background => u64::MAX,
    }
}

/// Noise stream seed for one (image, role) pair.
pub fn noise_seed(options: &SanitizerOptions, level_seed: u64, image_index: usize, role: SegmentRole) -> u64 {
    derive_seed(options.seed, &[level_seed, image_index as u64, role_tag(role)])
}

/// Reduces one segment to what its level allows to be shared.
pub fn sanitize_segment(
    segment: &Segment,
    level: &SanitizationLevel,
    request: &UserRequest,
    options: &SanitizerOptions,
    image_index: usize,
    features: Option<&dyn FeatureService>,
) -> Result<SanitizedSegment> {
    let text = request
        .description(segment.role)
        .ok_or_else(|| Error::invalid(format!("role {} not in request", segment.role)))?
        .to_string();
    let noise = level.noise.map(|n| NoiseParams {
        sigma: n.sigma,
        seed: noise_seed(options, n.seed, image_index, segment.role),
    });
    let noisy = |img: &RasterImage, mask: &BitMask| -> Result<RasterImage> {
        match noise {
            Some(p) => add_gaussian_noise(img, mask, p),
            None => Ok(img.clone()),
        }
    };

    let payload = match level.scheme {
        Scheme::L0 => Payload::None,
        Scheme::L2 => Payload::Raw(noisy(&segment.canvas, &segment.mask)?),
        Scheme::L1(kind) => {
            let source = match options.noise_order {
                NoiseOrder::BeforeFeatures => noisy(&segment.canvas, &segment.mask)?,
                NoiseOrder::AfterFeatures => segment.canvas.clone(),
            };
            let feature = match kind {
                FeatureKind::Canny => canny_edges_with(&source, options.canny)?,
                other => features
                    .ok_or_else(|| {
                        Error::BackendUnavailable(format!(
                            "no feature service configured for {}",
                            other.as_str()
                        ))
                    })?
                    .extract(other, &source)?,
            };
            feature.ensure_same_dims(segment.canvas.width(), segment.canvas.height(), "feature image")?;
            match options.noise_order {
                NoiseOrder::BeforeFeatures => Payload::Feature(feature),
                NoiseOrder::AfterFeatures => {
                    Payload::Feature(noisy(&feature, &BitMask::full(feature.width(), feature.height()))?)
                }
            }
        }
    };
    Ok(SanitizedSegment {
        role: segment.role,
        text,
        scheme_used: *level,
        payload,
    })
}

/// Sanitizes every image. `images[i]` is segmented by `manifest[i]`.
pub fn build_bundle(
    request: &UserRequest,
    images: &[RasterImage],
    manifest: &[ManifestEntry],
    preference: &PrivacyPreference,
    options: &SanitizerOptions,
    features: Option<&dyn FeatureService>,
) -> Result<SanitizedBundle> {
    request.validate()?;
    preference.validate_for(request)?;
    if images.len() != manifest.len() {
        return Err(Error::invalid(format!(
            "{} images but {} manifest entries",
            images.len(),
            manifest.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::invalid("at least one reference image is required"));
    }
    let mut entries = Vec::with_capacity(images.len());
    for (index, (img, entry)) in images.iter().zip(manifest).enumerate() {
        let segments = split_segments(img, entry, request).map_err(|e| e.at_image(index))?;
        let sanitized = segments
            .iter()
            .map(|seg| {
                let level = preference
                    .get(seg.role)
                    .expect("preference validated against request");
                sanitize_segment(seg, level, request, options, index, features)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_image(index))?;
        entries.push(BundleEntry {
            name: entry.image.clone(),
            width: img.width(),
            height: img.height(),
            segments: sanitized,
        });
    }
    Ok(SanitizedBundle {
        request: request.clone(),
        preference: preference.clone(),
        seed: options.seed,
        entries,
    })
}

impl SanitizedBundle {
    /// Structural checks applied to bundles received over the wire.
    pub fn validate(&self) -> Result<()> {
        self.request.validate()?;
        self.preference.validate_for(&self.request)?;
        let roles = self.request.roles();
        for (index, entry) in self.entries.iter().enumerate() {
            let at = |e: Error| e.at_image(index);
            if entry.segments.len() != roles.len() {
                return Err(at(Error::InconsistentBundle(format!(
                    "expected {} segments, found {}",
                    roles.len(),
                    entry.segments.len()
                ))));
            }
            for (seg, role) in entry.segments.iter().zip(&roles) {
                if seg.role != *role {
                    return Err(at(Error::InconsistentBundle(format!(
                        "segment for role {} out of order (expected {role})",
                        seg.role
                    ))));
                }
                let want = self.preference.get(*role).expect("validated");
                if seg.scheme_used.scheme != want.scheme {
                    return Err(at(Error::InconsistentBundle(format!(
                        "role {role} sanitized with {} but preference says {want}",
                        seg.scheme_used
                    ))));
                }
                if Some(seg.text.as_str()) != self.request.description(*role) {
                    return Err(at(Error::InconsistentBundle(format!(
                        "text for role {role} does not match the request"
                    ))));
                }
                let ok = matches!(
                    (seg.scheme_used.scheme, &seg.payload),
                    (Scheme::L0, Payload::None)
                        | (Scheme::L1(_), Payload::Feature(_))
                        | (Scheme::L2, Payload::Raw(_))
                );
                if !ok {
                    return Err(at(Error::InconsistentBundle(format!(
                        "role {role}: payload {} does not match scheme {}",
                        seg.payload.kind(),
                        seg.scheme_used
                    ))));
                }
                if let Some(img) = seg.payload.image() {
                    img.ensure_same_dims(entry.width, entry.height, "segment payload")
                        .map_err(at)?;
                }
            }
        }
        Ok(())
    }

    /// Number of segments that carry pixel data.
    pub fn payload_count(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|e| &e.segments)
            .filter(|s| s.payload.image().is_some())
            .count()
    }
}

/// Renders the shared pixels of one image's segments onto a single canvas.
///
/// Starts from zero, pastes the background payload first and targets over it,
/// copying only nonzero pixels. Text-only segments contribute nothing. The canvas
/// takes the widest pixel format among the payloads (gray when there are none).
pub fn render_bundle_canvas(entry: &BundleEntry) -> Result<RasterImage> {
    let mut payloads: Vec<(SegmentRole, &RasterImage)> = entry
        .segments
        .iter()
        .filter_map(|s| s.payload.image().map(|img| (s.role, img)))
        .collect();
    for (_, img) in &payloads {
        img.ensure_same_dims(entry.width, entry.height, "render_bundle_canvas")?;
    }
    // Background first so targets land on top.
    payloads.sort_by_key(|(role, _)| match role {
        SegmentRole::Background => (0, 0),
        SegmentRole::Target(i) => (1, *i as u32),
    });
    let format = payloads
        .iter()
        .map(|(_, img)| img.format())
        .max()
        .unwrap_or(PixelFormat::Gray8);
    let mut canvas = RasterImage::zeros(entry.width, entry.height, format);
    for (_, img) in payloads {
        let img = img.convert(format);
        let cc = format.color_channels();
        for y in 0..entry.height {
            for x in 0..entry.width {
                let src = img.pixel(x, y);
                if src[..cc].iter().any(|&v| v != 0) {
                    canvas.pixel_mut(x, y).copy_from_slice(src);
                }
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::composite;
    use crate::testutil::{husky_request, scene};
    use alloc::vec;

    fn entry_for(mask: &BitMask) -> ManifestEntry {
        ManifestEntry {
            image: "img.png".into(),
            masks: vec![RoleMask {
                role: SegmentRole::Target(0),
                mask: mask.clone(),
                confidence: 0.9,
            }],
        }
    }

    #[test]
    fn split_degenerate_masks() {
        let (img, _) = scene(16, 12, 1);
        let req = husky_request();
        let segs = split_segments(&img, &entry_for(&BitMask::full(16, 12)), &req).unwrap();
        assert_eq!(segs[0].role, SegmentRole::Target(0));
        assert_eq!(segs[0].canvas, img);
        assert!(segs[1].canvas.as_bytes().iter().all(|&v| v == 0));

        let segs = split_segments(&img, &entry_for(&BitMask::empty(16, 12)), &req).unwrap();
        assert!(segs[0].canvas.as_bytes().iter().all(|&v| v == 0));
        assert_eq!(segs[1].canvas, img);
    }

    #[test]
    fn split_reconstructs_image() {
        let (img, mask) = scene(20, 20, 3);
        let segs = split_segments(&img, &entry_for(&mask), &husky_request()).unwrap();
        let rebuilt = composite(&segs[0].canvas, &segs[0].mask, &segs[1].canvas).unwrap();
        assert_eq!(rebuilt, img);
    }

    #[test]
    fn missing_target_mask() {
        let (img, _) = scene(8, 8, 0);
        let entry = ManifestEntry {
            image: "x".into(),
            masks: vec![],
        };
        let err = split_segments(&img, &entry, &husky_request()).unwrap_err();
        assert_eq!(
            err,
            Error::IncompleteSegmentation {
                role: SegmentRole::Target(0)
            }
        );
    }

    #[test]
    fn supplied_background_must_be_complement() {
        let (img, mask) = scene(8, 8, 0);
        let mut entry = entry_for(&mask);
        entry.masks.push(RoleMask {
            role: SegmentRole::Background,
            mask: mask.complement(),
            confidence: 1.0,
        });
        assert!(split_segments(&img, &entry, &husky_request()).is_ok());
        entry.masks[1].mask = BitMask::full(8, 8);
        assert_eq!(
            split_segments(&img, &entry, &husky_request()).unwrap_err().code(),
            "inconsistent_segmentation"
        );
    }

    #[test]
    fn l0_is_text_only() {
        let (img, mask) = scene(16, 16, 2);
        let req = husky_request();
        let segs = split_segments(&img, &entry_for(&mask), &req).unwrap();
        let out = sanitize_segment(&segs[0], &SanitizationLevel::L0, &req, &Default::default(), 0, None).unwrap();
        assert_eq!(out.text, "dog");
        assert_eq!(out.payload, Payload::None);
        let bg = sanitize_segment(&segs[1], &SanitizationLevel::L0, &req, &Default::default(), 0, None).unwrap();
        assert_eq!(bg.text, "bedroom");
    }

    #[test]
    fn l1_canny_of_constant_segment_is_empty() {
        let req = husky_request();
        let seg = Segment {
            role: SegmentRole::Target(0),
            canvas: RasterImage::filled(16, 16, PixelFormat::Rgb8, &[80, 80, 80]),
            mask: BitMask::full(16, 16),
        };
        let out = sanitize_segment(
            &seg,
            &SanitizationLevel::l1(FeatureKind::Canny),
            &req,
            &Default::default(),
            0,
            None,
        )
        .unwrap();
        match out.payload {
            Payload::Feature(f) => assert!(f.as_bytes().iter().all(|&v| v == 0)),
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn l1_pose_without_service_is_backend_unavailable() {
        let (img, mask) = scene(8, 8, 0);
        let req = husky_request();
        let segs = split_segments(&img, &entry_for(&mask), &req).unwrap();
        let err = sanitize_segment(
            &segs[0],
            &SanitizationLevel::l1(FeatureKind::Pose),
            &req,
            &Default::default(),
            0,
            None,
        )
        .unwrap_err();
        assert_eq!(err.code(), "backend_unavailable");
    }

    #[test]
    fn l2_with_zero_noise_is_passthrough() {
        let (img, mask) = scene(16, 16, 5);
        let req = husky_request();
        let segs = split_segments(&img, &entry_for(&mask), &req).unwrap();
        let level = SanitizationLevel::L2.with_noise(NoiseParams::new(0.0, 9).unwrap());
        let out = sanitize_segment(&segs[0], &level, &req, &Default::default(), 0, None).unwrap();
        assert_eq!(out.payload, Payload::Raw(segs[0].canvas.clone()));
    }

    #[test]
    fn noise_stays_inside_role_mask() {
        let (img, mask) = scene(24, 24, 5);
        let req = husky_request();
        let segs = split_segments(&img, &entry_for(&mask), &req).unwrap();
        let level = SanitizationLevel::L2.with_noise(NoiseParams::new(30.0, 1).unwrap());
        let out = sanitize_segment(&segs[0], &level, &req, &Default::default(), 0, None).unwrap();
        let raw = out.payload.image().unwrap();
        for y in 0..24 {
            for x in 0..24 {
                if !mask.get(x, y) {
                    assert_eq!(raw.pixel(x, y), &[0, 0, 0]);
                }
            }
        }
        assert_ne!(raw, &segs[0].canvas);
    }

    #[test]
    fn bundle_all_l0_has_no_payloads() {
        let req = husky_request();
        let (imgs, manifest): (Vec<_>, Vec<_>) = (0..5)
            .map(|i| {
                let (img, mask) = scene(16, 16, i);
                (img, entry_for(&mask))
            })
            .unzip();
        let pref = PrivacyPreference::pair(SanitizationLevel::L0, SanitizationLevel::L0);
        let b = build_bundle(&req, &imgs, &manifest, &pref, &Default::default(), None).unwrap();
        assert_eq!(b.entries.len(), 5);
        assert_eq!(b.entries.iter().map(|e| e.segments.len()).sum::<usize>(), 10);
        assert_eq!(b.payload_count(), 0);
        b.validate().unwrap();
        for e in &b.entries {
            let canvas = render_bundle_canvas(e).unwrap();
            assert!(canvas.as_bytes().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn bundle_errors_carry_image_index() {
        let req = husky_request();
        let (img, mask) = scene(16, 16, 0);
        let bad = ManifestEntry {
            image: "b".into(),
            masks: vec![],
        };
        let pref = PrivacyPreference::pair(SanitizationLevel::L0, SanitizationLevel::L0);
        let err = build_bundle(
            &req,
            &[img.clone(), img],
            &[entry_for(&mask), bad],
            &pref,
            &Default::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtImage { index: 1, .. }));
        assert_eq!(err.code(), "incomplete_segmentation");
    }

    #[test]
    fn three_role_preference() {
        let mut req = husky_request();
        req.target_objects = vec!["bottle".into(), "photo frame".into()];
        let (img, m1) = scene(24, 24, 1);
        let m2 = BitMask::from_fn(24, 24, |x, y| x < 6 && y < 6);
        let entry = ManifestEntry {
            image: "a".into(),
            masks: vec![
                RoleMask {
                    role: SegmentRole::Target(0),
                    mask: m1,
                    confidence: 0.8,
                },
                RoleMask {
                    role: SegmentRole::Target(1),
                    mask: m2,
                    confidence: 0.7,
                },
            ],
        };
        let pref: PrivacyPreference = "t1=L0,t2=L1,b=L2".parse().unwrap();
        let b = build_bundle(&req, &[img], &[entry], &pref, &Default::default(), None).unwrap();
        let segs = &b.entries[0].segments;
        assert_eq!(segs[0].text, "bottle");
        assert_eq!(segs[0].payload, Payload::None);
        assert_eq!(segs[1].text, "photo frame");
        assert!(matches!(segs[1].payload, Payload::Feature(_)));
        assert_eq!(segs[2].text, "bedroom");
        assert!(matches!(segs[2].payload, Payload::Raw(_)));
    }

    #[test]
    fn render_reconstructs_from_raw_pair() {
        let req = husky_request();
        let (img, mask) = scene(20, 20, 7);
        let pref = PrivacyPreference::pair(SanitizationLevel::L2, SanitizationLevel::L2);
        let b = build_bundle(&req, &[img.clone()], &[entry_for(&mask)], &pref, &Default::default(), None).unwrap();
        assert_eq!(render_bundle_canvas(&b.entries[0]).unwrap(), img);

        let pref = PrivacyPreference::pair(SanitizationLevel::L2, SanitizationLevel::L0);
        let b = build_bundle(&req, &[img.clone()], &[entry_for(&mask)], &pref, &Default::default(), None).unwrap();
        assert_eq!(
            render_bundle_canvas(&b.entries[0]).unwrap(),
            apply_mask(&img, &mask).unwrap()
        );
    }

    #[test]
    fn validate_rejects_payload_scheme_mismatch() {
        let req = husky_request();
        let (img, mask) = scene(8, 8, 0);
        let pref = PrivacyPreference::pair(SanitizationLevel::L0, SanitizationLevel::L0);
        let mut b = build_bundle(&req, &[img.clone()], &[entry_for(&mask)], &pref, &Default::default(), None).unwrap();
        b.entries[0].segments[0].payload = Payload::Raw(img);
        assert_eq!(b.validate().unwrap_err().code(), "inconsistent_bundle");
    }
}
