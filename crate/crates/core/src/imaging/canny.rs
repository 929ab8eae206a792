use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{to_grayscale, PixelFormat, RasterImage};
use crate::error::{Error, Result};

/// Canny parameters. Thresholds are in Sobel gradient-magnitude units
/// (unnormalised 3x3 kernels, so the maximum is about 1442 for 8-bit input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub low: f32,
    pub high: f32,
    pub sigma: f32,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low: 50.0,
            high: 150.0,
            sigma: 1.4,
        }
    }
}

const KERNEL_RADIUS: usize = 2;

/// Binary canny edge map (0 / 255) with the default 5x5, sigma 1.4 blur.
pub fn canny_edges(img: &RasterImage, low: u8, high: u8) -> Result<RasterImage> {
    canny_edges_with(
        img,
        CannyParams {
            low: low as f32,
            high: high as f32,
            ..CannyParams::default()
        },
    )
}

pub fn canny_edges_with(img: &RasterImage, params: CannyParams) -> Result<RasterImage> {
    if params.low > params.high {
        return Err(Error::invalid("canny: low threshold exceeds high threshold"));
    }
    if !(params.sigma > 0.0) {
        return Err(Error::invalid("canny: blur sigma must be positive"));
    }
    let gray = to_grayscale(img);
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let src: Vec<f32> = gray.as_bytes().iter().map(|&v| v as f32).collect();

    let blurred = gaussian_blur(&src, w, h, params.sigma);
    let (gx, gy) = sobel(&blurred, w, h);
    let mag: Vec<f32> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| libm::sqrtf(a * a + b * b))
        .collect();
    let thin = non_maximum_suppression(&mag, &gx, &gy, w, h);
    let edges = hysteresis(&thin, w, h, params.low, params.high);
    RasterImage::from_raw(gray.width(), gray.height(), PixelFormat::Gray8, edges)
}

fn gaussian_kernel(sigma: f32) -> [f32; 2 * KERNEL_RADIUS + 1] {
    let mut k = [0f32; 2 * KERNEL_RADIUS + 1];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f32 - KERNEL_RADIUS as f32;
        *v = libm::expf(-(d * d) / (2.0 * sigma * sigma));
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[inline]
fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Separable 5x5 blur with replicated borders.
fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = KERNEL_RADIUS as isize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = clamp_idx(x as isize + i as isize - r, w);
                acc += kv * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = clamp_idx(y as isize + i as isize - r, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn sobel(src: &[f32], w: usize, h: usize) -> (Vec<f32>, Vec<f32>) {
    let at = |x: isize, y: isize| src[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0f32; w * h];
    let mut gy = vec![0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

// tan(22.5 deg) and tan(67.5 deg)
const TAN_22_5: f32 = 0.414_213_57;
const TAN_67_5: f32 = 2.414_213_6;

/// Keeps pixels that are maximal along the quantised gradient direction.
/// Ties are broken toward the first neighbour so plateaus thin to one pixel.
fn non_maximum_suppression(mag: &[f32], gx: &[f32], gy: &[f32], w: usize, h: usize) -> Vec<f32> {
    let get = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (dx, dy) = (gx[i], gy[i]);
            let (ax, ay) = (libm::fabsf(dx), libm::fabsf(dy));
            // Offsets of the two neighbours across the edge.
            let (ox, oy) = if ay <= ax * TAN_22_5 {
                (1, 0)
            } else if ay >= ax * TAN_67_5 {
                (0, 1)
            } else if (dx > 0.0) == (dy > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            let before = get(x - ox, y - oy);
            let after = get(x + ox, y + oy);
            if m > before && m >= after {
                out[i] = m;
            }
        }
    }
    out
}

/// Double threshold plus 8-connected hysteresis.
fn hysteresis(mag: &[f32], w: usize, h: usize, low: f32, high: f32) -> Vec<u8> {
    let mut out = vec![0u8; w * h];
    let mut stack = Vec::new();
    for start in 0..w * h {
        let m = mag[start];
        if m <= 0.0 || m < high || out[start] != 0 {
            continue;
        }
        out[start] = 255;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if out[j] == 0 && mag[j] > 0.0 && mag[j] >= low {
                        out[j] = 255;
                        stack.push(j);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(1.4);
        let s: f32 = k.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(k[0], k[4]);
        assert_eq!(k[1], k[3]);
        assert!(k[2] > k[1] && k[1] > k[0]);
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = RasterImage::filled(32, 32, PixelFormat::Rgb8, &[90, 120, 40]);
        let e = canny_edges(&img, 50, 150).unwrap();
        assert!(e.as_bytes().iter().all(|&v| v == 0));
    }

    #[test]
    fn low_above_high_rejected() {
        let img = RasterImage::zeros(4, 4, PixelFormat::Gray8);
        assert_eq!(canny_edges(&img, 200, 100).unwrap_err().code(), "invalid_argument");
    }

    #[test]
    fn step_edge_is_single_column() {
        let img = RasterImage::from_fn(64, 64, PixelFormat::Gray8, |x, _| {
            [if x < 32 { 0 } else { 255 }, 0, 0, 0]
        });
        let e = canny_edges(&img, 50, 150).unwrap();
        for y in 0..64 {
            let cols: Vec<u32> = (0..64).filter(|&x| e.pixel(x, y)[0] == 255).collect();
            assert_eq!(cols, vec![31], "row {y}");
        }
    }

    #[test]
    fn output_is_binary() {
        let img = RasterImage::from_fn(40, 30, PixelFormat::Gray8, |x, y| {
            [((x * 37 + y * 91) % 251) as u8, 0, 0, 0]
        });
        let e = canny_edges(&img, 20, 60).unwrap();
        assert!(e.as_bytes().iter().all(|&v| v == 0 || v == 255));
        assert_eq!(e, canny_edges(&img, 20, 60).unwrap());
    }
}
