//! Raster and mask primitives.
//!
//! Segments are kept as full-resolution canvases whose out-of-mask pixels are
//! zero, so every role canvas of one reference image stays co-registered with
//! the original.

mod canny;
mod raster;

pub use canny::{canny_edges, canny_edges_with, CannyParams};
pub use raster::{BitMask, PixelFormat, PixelRect, RasterImage};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BT.601 luma of one RGB sample, rounded half up.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Converts to single-channel luma. Alpha is ignored; gray input is returned as is.
pub fn to_grayscale(img: &RasterImage) -> RasterImage {
    match img.format() {
        PixelFormat::Gray8 => img.clone(),
        _ => {
            let data = img.pixels().map(|p| luma(p[0], p[1], p[2])).collect();
            RasterImage::from_raw(img.width(), img.height(), PixelFormat::Gray8, data)
                .expect("same dimensions")
        }
    }
}

/// Zeroes every pixel whose mask bit is false.
pub fn apply_mask(img: &RasterImage, mask: &BitMask) -> Result<RasterImage> {
    img.ensure_same_dims(mask.width(), mask.height(), "apply_mask")?;
    let mut out = img.clone();
    for (px, &keep) in out.pixels_mut().zip(mask.bits()) {
        if !keep {
            px.fill(0);
        }
    }
    Ok(out)
}

/// Takes `fg` where `fg_mask` is set and `bg` elsewhere.
///
/// `bg` is converted to the foreground's pixel format first.
pub fn composite(fg: &RasterImage, fg_mask: &BitMask, bg: &RasterImage) -> Result<RasterImage> {
    fg.ensure_same_dims(fg_mask.width(), fg_mask.height(), "composite")?;
    fg.ensure_same_dims(bg.width(), bg.height(), "composite")?;
    let mut out = bg.convert(fg.format());
    for ((dst, src), &m) in out.pixels_mut().zip(fg.pixels()).zip(fg_mask.bits()) {
        if m {
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Gaussian noise configuration. `sigma` is in 8-bit intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        Ok(Self { sigma, seed })
    }
}

/// Adds rounded, clamped N(0, sigma^2) noise to the colour channels of masked pixels.
///
/// Samples are drawn from a ChaCha8 stream seeded with `params.seed`, one per
/// colour channel of each masked pixel in row-major order. Alpha is left alone.
pub fn add_gaussian_noise(
    img: &RasterImage,
    mask: &BitMask,
    params: NoiseParams,
) -> Result<RasterImage> {
    img.ensure_same_dims(mask.width(), mask.height(), "add_gaussian_noise")?;
    if !(params.sigma >= 0.0) || !params.sigma.is_finite() {
        return Err(Error::invalid("noise sigma must be finite and >= 0"));
    }
    if params.sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, params.sigma).map_err(|e| Error::invalid(alloc::format!("{e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let cc = img.format().color_channels();
    let mut out = img.clone();
    for (px, &m) in out.pixels_mut().zip(mask.bits()) {
        if !m {
            continue;
        }
        for v in &mut px[..cc] {
            let n = libm::round(normal.sample(&mut rng));
            *v = (*v as f64 + n).clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rgb(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> RasterImage {
        RasterImage::from_fn(w, h, PixelFormat::Rgb8, |x, y| {
            let [r, g, b] = f(x, y);
            [r, g, b, 0]
        })
    }

    #[test]
    fn grayscale_known_values() {
        let img = rgb(3, 1, |x, _| match x {
            0 => [255, 255, 255],
            1 => [255, 0, 0],
            _ => [0, 0, 0],
        });
        let g = to_grayscale(&img);
        assert_eq!(g.as_bytes(), &[255, 76, 0]);
        // round(0.587 * 255) = round(149.685) = 150, round(0.114 * 255) = round(29.07) = 29
        assert_eq!(luma(0, 255, 0), 150);
        assert_eq!(luma(0, 0, 255), 29);
    }

    #[test]
    fn grayscale_identity_on_gray_and_ignores_alpha() {
        let g = RasterImage::from_fn(4, 4, PixelFormat::Gray8, |x, y| [(x * 16 + y) as u8, 0, 0, 0]);
        assert_eq!(to_grayscale(&g), g);
        let a = RasterImage::from_fn(1, 1, PixelFormat::Rgba8, |_, _| [10, 20, 30, 0]);
        let b = RasterImage::from_fn(1, 1, PixelFormat::Rgba8, |_, _| [10, 20, 30, 255]);
        assert_eq!(to_grayscale(&a), to_grayscale(&b));
    }

    #[test]
    fn mask_full_empty_and_rows() {
        let img = rgb(2, 2, |x, y| [1 + x as u8, 2 + y as u8, 3]);
        assert_eq!(apply_mask(&img, &BitMask::full(2, 2)).unwrap(), img);
        assert!(apply_mask(&img, &BitMask::empty(2, 2))
            .unwrap()
            .as_bytes()
            .iter()
            .all(|&v| v == 0));
        let top = BitMask::from_fn(2, 2, |_, y| y == 0);
        let out = apply_mask(&img, &top).unwrap();
        assert_eq!(out.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(out.pixel(1, 0), img.pixel(1, 0));
        assert_eq!(out.pixel(0, 1), &[0, 0, 0]);
        assert_eq!(out.pixel(1, 1), &[0, 0, 0]);
    }

    #[test]
    fn mask_dimension_mismatch() {
        let img = rgb(2, 2, |_, _| [1, 1, 1]);
        let err = apply_mask(&img, &BitMask::full(3, 2)).unwrap_err();
        assert_eq!(err.code(), "invalid_argument");
        assert!(composite(&img, &BitMask::full(2, 2), &rgb(2, 3, |_, _| [0; 3])).is_err());
    }

    #[test]
    fn composite_checkerboard() {
        let fg = rgb(4, 4, |_, _| [200, 200, 200]);
        let bg = rgb(4, 4, |_, _| [7, 7, 7]);
        let m = BitMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        assert_eq!(composite(&fg, &BitMask::full(4, 4), &bg).unwrap(), fg);
        assert_eq!(composite(&fg, &BitMask::empty(4, 4), &bg).unwrap(), bg);
        let out = composite(&fg, &m, &bg).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (x + y) % 2 == 0 { 200 } else { 7 };
                assert_eq!(out.pixel(x, y), &[want; 3]);
            }
        }
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let img = rgb(8, 8, |x, y| [x as u8 * 30, y as u8 * 30, 9]);
        let p = NoiseParams::new(0.0, 42).unwrap();
        assert_eq!(add_gaussian_noise(&img, &BitMask::full(8, 8), p).unwrap(), img);
    }

    #[test]
    fn noise_statistics_and_mask() {
        let img = RasterImage::filled(256, 256, PixelFormat::Gray8, &[128]);
        let p = NoiseParams::new(10.0, 7).unwrap();
        let out = add_gaussian_noise(&img, &BitMask::full(256, 256), p).unwrap();
        let n = out.pixel_count() as f64;
        let mean = out.as_bytes().iter().map(|&v| v as f64 - 128.0).sum::<f64>() / n;
        let var = out
            .as_bytes()
            .iter()
            .map(|&v| (v as f64 - 128.0 - mean) * (v as f64 - 128.0 - mean))
            .sum::<f64>()
            / (n - 1.0);
        let sd = libm::sqrt(var);
        assert!((sd - 10.0).abs() <= 0.5, "sd = {sd}");

        let half = BitMask::from_fn(256, 256, |x, _| x < 128);
        let out = add_gaussian_noise(&img, &half, p).unwrap();
        for y in 0..256 {
            for x in 128..256 {
                assert_eq!(out.pixel(x, y), &[128]);
            }
        }
    }

    #[test]
    fn noise_is_reproducible_and_skips_alpha() {
        let img = RasterImage::filled(16, 16, PixelFormat::Rgba8, &[100, 100, 100, 77]);
        let p = NoiseParams::new(20.0, 3).unwrap();
        let m = BitMask::full(16, 16);
        let a = add_gaussian_noise(&img, &m, p).unwrap();
        let b = add_gaussian_noise(&img, &m, p).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().all(|px| px[3] == 77));
        let c = add_gaussian_noise(&img, &m, NoiseParams::new(20.0, 4).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(NoiseParams::new(-1.0, 0).is_err());
        assert!(NoiseParams::new(f64::NAN, 0).is_err());
    }

    #[test]
    fn mask_helpers() {
        let m = BitMask::from_fn(5, 4, |x, y| (1..=3).contains(&x) && y == 2);
        assert_eq!(
            m.bounding_rect(),
            Some(PixelRect {
                x: 1,
                y: 2,
                w: 3,
                h: 1
            })
        );
        assert_eq!(BitMask::empty(2, 2).bounding_rect(), None);
        assert_eq!(m.complement().count(), 20 - 3);
        let img = m.to_image();
        assert_eq!(BitMask::from_image(&img), m);
        assert!(BitMask::from_bits(2, 2, vec![true; 3]).is_err());
    }
}
