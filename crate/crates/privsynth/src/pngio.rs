//! Lossless PNG codec for rasters and masks. Encoding is deterministic so
//! the same raster always yields the same bytes.

use std::path::Path;

use privsynth_core::imaging::{BitMask, PixelFormat, RasterImage};

use crate::error::{Error, Result};

pub fn encode(img: &RasterImage) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width(), img.height());
    enc.set_color(match img.format() {
        PixelFormat::Gray8 => png::ColorType::Grayscale,
        PixelFormat::Rgb8 => png::ColorType::Rgb,
        PixelFormat::Rgba8 => png::ColorType::Rgba,
    });
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    let mut w = enc.write_header().expect("writing to a Vec cannot fail");
    w.write_image_data(img.as_bytes()).expect("buffer length matches header");
    w.finish().expect("writing to a Vec cannot fail");
    out
}

/// Decodes 8-bit gray, RGB and RGBA; palette and 16-bit images are expanded
/// or stripped to 8 bits, gray+alpha becomes RGBA.
pub fn decode(bytes: &[u8]) -> Result<RasterImage> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width, info.height);
    let img = match info.color_type {
        png::ColorType::Grayscale => RasterImage::from_raw(w, h, PixelFormat::Gray8, buf)?,
        png::ColorType::Rgb => RasterImage::from_raw(w, h, PixelFormat::Rgb8, buf)?,
        png::ColorType::Rgba => RasterImage::from_raw(w, h, PixelFormat::Rgba8, buf)?,
        png::ColorType::GrayscaleAlpha => {
            let rgba = buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0], p[1]]).collect();
            RasterImage::from_raw(w, h, PixelFormat::Rgba8, rgba)?
        }
        other => return Err(Error::Image(format!("unsupported colour type {other:?}"))),
    };
    Ok(img)
}

pub fn read(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, img: &RasterImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(Error::io(path))
}

pub fn encode_mask(mask: &BitMask) -> Vec<u8> {
    encode(&mask.to_image())
}

/// Any non-zero luma counts as set.
pub fn decode_mask(bytes: &[u8]) -> Result<BitMask> {
    Ok(BitMask::from_image(&decode(bytes)?))
}

pub fn read_mask(path: &Path) -> Result<BitMask> {
    Ok(BitMask::from_image(&read(path)?))
}

pub fn write_mask(path: &Path, mask: &BitMask) -> Result<()> {
    write(path, &mask.to_image())
}
