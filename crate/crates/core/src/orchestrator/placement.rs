use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BitMask, PixelRect, RasterImage};

/// Target height as a fraction of canvas height, drawn uniformly from
/// `[min_scale, max_scale]`; the upper bound shrinks when a wide target would
/// not fit horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementOptions {
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for PlacementOptions {
    fn default() -> Self {
        Self {
            min_scale: 0.2,
            max_scale: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    /// Tight box of the placed alpha, in canvas pixels.
    pub bbox: PixelRect,
    /// Rectangle the scaled target crop was pasted into.
    pub paste: PixelRect,
    pub scale: f64,
    pub target_mask: BitMask,
    pub background_mask: BitMask,
}

impl Placement {
    /// Pastes the target crop (cut to `alpha`'s tight box and scaled like the
    /// mask) onto a zero canvas of `target`'s format.
    pub fn place_image(&self, target: &RasterImage, alpha: &BitMask) -> Result<RasterImage> {
        target.ensure_same_dims(alpha.width(), alpha.height(), "target alpha")?;
        let tight = alpha
            .bounding_rect()
            .ok_or_else(|| Error::PlacementInfeasible("target alpha is empty".into()))?;
        let scaled = target.crop(tight)?.resize_nearest(self.paste.w, self.paste.h);
        let (cw, ch) = self.target_mask.dimensions();
        let mut out = RasterImage::zeros(cw, ch, target.format());
        for y in 0..self.paste.h {
            for x in 0..self.paste.w {
                let (px, py) = (self.paste.x + x, self.paste.y + y);
                if self.target_mask.get(px, py) {
                    out.pixel_mut(px, py).copy_from_slice(scaled.pixel(x, y));
                }
            }
        }
        Ok(out)
    }
}

pub fn sample_placement(
    canvas_width: u32,
    canvas_height: u32,
    alpha: &BitMask,
    seed: u64,
    options: &PlacementOptions,
) -> Result<Placement> {
    let (lo, hi) = (options.min_scale, options.max_scale);
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("placement scale bounds [{lo}, {hi}] not within (0, 1]")));
    }
    if canvas_width == 0 || canvas_height == 0 {
        return Err(Error::invalid("empty canvas"));
    }
    let tight = alpha
        .bounding_rect()
        .ok_or_else(|| Error::PlacementInfeasible("target alpha is empty".into()))?;
    let aspect = tight.w as f64 / tight.h as f64;
    let (cw, ch) = (canvas_width as f64, canvas_height as f64);
    let fit = hi.min(cw / (aspect * ch));
    if fit < lo {
        return Err(Error::PlacementInfeasible(format!(
            "a {}x{} target does not fit a {canvas_width}x{canvas_height} canvas at scale {lo}",
            tight.w, tight.h
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if fit > lo { rng.random_range(lo..=fit) } else { lo };
    let h = (libm::round(scale * ch) as u32).clamp(1, canvas_height);
    let w = (libm::round(h as f64 * aspect) as u32).clamp(1, canvas_width);
    let x = rng.random_range(0..=canvas_width - w);
    let y = rng.random_range(0..=canvas_height - h);

    let scaled = alpha.crop(tight)?.resize_nearest(w, h);
    let target_mask = BitMask::from_fn(canvas_width, canvas_height, |px, py| {
        px >= x && py >= y && px < x + w && py < y + h && scaled.get(px - x, py - y)
    });
    let bbox = target_mask
        .bounding_rect()
        .ok_or_else(|| Error::PlacementInfeasible("target vanishes when scaled".into()))?;
    Ok(Placement {
        bbox,
        paste: PixelRect { x, y, w, h },
        scale,
        background_mask: target_mask.complement(),
        target_mask,
    })
}
