use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample layout of a [`RasterImage`]. All formats are 8 bits per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelFormat {
    Gray8,
    Rgb8,
    Rgba8,
}

impl PixelFormat {
    pub const fn channels(self) -> usize {
        match self {
            PixelFormat::Gray8 => 1,
            PixelFormat::Rgb8 => 3,
            PixelFormat::Rgba8 => 4,
        }
    }

    /// Number of colour (non-alpha) channels.
    pub const fn color_channels(self) -> usize {
        match self {
            PixelFormat::Gray8 => 1,
            PixelFormat::Rgb8 | PixelFormat::Rgba8 => 3,
        }
    }
}

/// Row-major 8-bit raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    format: PixelFormat,
    data: Vec<u8>,
}

impl core::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("format", &self.format)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn from_raw(width: u32, height: u32, format: PixelFormat, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        let expected = width as usize * height as usize * format.channels();
        if data.len() != expected {
            return Err(Error::invalid(alloc::format!(
                "pixel buffer has {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            format,
            data,
        })
    }

    /// An all-zero image.
    ///
    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(width: u32, height: u32, format: PixelFormat) -> Self {
        Self::filled(width, height, format, &[0; 4][..format.channels()])
    }

    /// An image with every pixel set to `pixel`.
    ///
    /// # Panics
    /// If either dimension is zero or `pixel` has the wrong channel count.
    pub fn filled(width: u32, height: u32, format: PixelFormat, pixel: &[u8]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be at least 1x1");
        assert_eq!(pixel.len(), format.channels());
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * pixel.len());
        for _ in 0..n {
            data.extend_from_slice(pixel);
        }
        Self {
            width,
            height,
            format,
            data,
        }
    }

    /// Builds an image by evaluating `f(x, y)` for each pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        format: PixelFormat,
        mut f: impl FnMut(u32, u32) -> [u8; 4],
    ) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be at least 1x1");
        let c = format.channels();
        let mut data = Vec::with_capacity(width as usize * height as usize * c);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y)[..c]);
            }
        }
        Self {
            width,
            height,
            format,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn format(&self) -> PixelFormat {
        self.format
    }

    pub fn channels(&self) -> usize {
        self.format.channels()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels();
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let c = self.channels();
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    /// Iterates pixels in row-major order.
    pub fn pixels(&self) -> core::slice::ChunksExact<'_, u8> {
        self.data.chunks_exact(self.channels())
    }

    pub(crate) fn pixels_mut(&mut self) -> core::slice::ChunksExactMut<'_, u8> {
        let c = self.channels();
        self.data.chunks_exact_mut(c)
    }

    /// True when every pixel equals the first one.
    pub fn is_constant(&self) -> bool {
        let mut it = self.pixels();
        match it.next() {
            Some(first) => it.all(|p| p == first),
            None => true,
        }
    }

    /// Returns a copy converted to `format`. Gray expands to equal RGB;
    /// added alpha is opaque; dropping colour uses BT.601 luma.
    pub fn convert(&self, format: PixelFormat) -> RasterImage {
        if format == self.format {
            return self.clone();
        }
        if format == PixelFormat::Gray8 {
            return super::to_grayscale(self);
        }
        let src = self.format;
        RasterImage::from_fn(self.width, self.height, format, |x, y| {
            let p = self.pixel(x, y);
            match src {
                PixelFormat::Gray8 => [p[0], p[0], p[0], 255],
                PixelFormat::Rgb8 => [p[0], p[1], p[2], 255],
                PixelFormat::Rgba8 => [p[0], p[1], p[2], p[3]],
            }
        })
    }

    /// Mask of pixels where any colour channel is nonzero.
    pub fn nonzero_mask(&self) -> BitMask {
        let cc = self.format.color_channels();
        BitMask {
            width: self.width,
            height: self.height,
            bits: self.pixels().map(|p| p[..cc].iter().any(|&v| v != 0)).collect(),
        }
    }

    /// Nearest-neighbour resample to `width` x `height`.
    pub fn resize_nearest(&self, width: u32, height: u32) -> RasterImage {
        RasterImage::from_fn(width, height, self.format, |x, y| {
            let sx = nearest_src(x, width, self.width);
            let sy = nearest_src(y, height, self.height);
            let mut out = [0u8; 4];
            out[..self.channels()].copy_from_slice(self.pixel(sx, sy));
            out
        })
    }

    /// Copies the `rect` region into a new image.
    pub fn crop(&self, rect: PixelRect) -> Result<RasterImage> {
        if !rect.fits_within(self.width, self.height) {
            return Err(Error::invalid("crop rectangle outside image"));
        }
        Ok(RasterImage::from_fn(rect.w, rect.h, self.format, |x, y| {
            let mut out = [0u8; 4];
            out[..self.channels()].copy_from_slice(self.pixel(rect.x + x, rect.y + y));
            out
        }))
    }

    pub(crate) fn ensure_same_dims(&self, w: u32, h: u32, what: &str) -> Result<()> {
        if self.width != w || self.height != h {
            return Err(Error::invalid(alloc::format!(
                "{what}: dimension mismatch {}x{} vs {w}x{h}",
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

pub(crate) fn nearest_src(dst: u32, dst_len: u32, src_len: u32) -> u32 {
    let s = (dst as u64 * src_len as u64) / dst_len as u64;
    (s as u32).min(src_len - 1)
}

/// Axis-aligned integer rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

/// Per-pixel boolean mask, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl core::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count())
            .finish()
    }
}

impl BitMask {
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be at least 1x1"));
        }
        if bits.len() != width as usize * height as usize {
            return Err(Error::invalid("mask length does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::from_fn(width, height, |_, _| true)
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::from_fn(width, height, |_, _| false)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be at least 1x1");
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> BitMask {
        BitMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BitMask) -> Result<BitMask> {
        self.zip_with(other, |a, b| a && b)
    }

    fn zip_with(&self, other: &BitMask, f: impl Fn(bool, bool) -> bool) -> Result<BitMask> {
        if self.dimensions() != other.dimensions() {
            return Err(Error::invalid("mask dimension mismatch"));
        }
        Ok(BitMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Tight bounding rectangle of set bits, `None` for an empty mask.
    pub fn bounding_rect(&self) -> Option<PixelRect> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| PixelRect {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    pub fn crop(&self, rect: PixelRect) -> Result<BitMask> {
        if !rect.fits_within(self.width, self.height) {
            return Err(Error::invalid("crop rectangle outside mask"));
        }
        Ok(BitMask::from_fn(rect.w, rect.h, |x, y| {
            self.get(rect.x + x, rect.y + y)
        }))
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> BitMask {
        BitMask::from_fn(width, height, |x, y| {
            self.get(
                nearest_src(x, width, self.width),
                nearest_src(y, height, self.height),
            )
        })
    }

    /// Mask as a single-channel image, 255 for set bits.
    pub fn to_image(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            format: PixelFormat::Gray8,
            data: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Reads a mask from an image: any nonzero colour sample counts as set.
    pub fn from_image(img: &RasterImage) -> BitMask {
        img.nonzero_mask()
    }
}
