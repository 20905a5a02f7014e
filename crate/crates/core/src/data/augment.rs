//! Geometric augmentation applied jointly to image and labels.
//!
//! Labels are resampled nearest-neighbor, images bilinearly; pixels that
//! map outside the source become background / black. Existence bits are
//! recomputed afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LaneSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    /// Maximum absolute rotation in degrees; 0 disables.
    pub rotate_deg: f64,
    /// Smallest crop fraction; 1 disables.
    pub crop_min: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            rotate_deg: 2.0,
            crop_min: 0.9,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: false,
            rotate_deg: 0.0,
            crop_min: 1.0,
        }
    }
}

/// Mirror left-right. Lane slot `k` becomes `L + 1 - k`, so the lanes stay
/// numbered from the left.
pub fn hflip(s: &LaneSample) -> LaneSample {
    let (h, w) = (s.height(), s.width());
    let slots = s.exist.len() as u8;
    let mut img = s.image.clone();
    {
        let d = img.data_mut();
        for plane in d.chunks_exact_mut(w) {
            plane.reverse();
        }
    }
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = s.labels[y * w + (w - 1 - x)];
            labels[y * w + x] = if l > 0 && l <= slots { slots + 1 - l } else { l };
        }
    }
    let mut out = LaneSample {
        image: img,
        labels,
        exist: s.exist.clone(),
    };
    out.refresh_existence();
    out
}

/// Resamples through `src(y, x) -> (sy, sx)` in source pixel coordinates.
fn warp(s: &LaneSample, src: impl Fn(f64, f64) -> (f64, f64)) -> LaneSample {
    let (h, w) = (s.height(), s.width());
    let inside = |y: f64, x: f64| y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64;
    let mut labels = vec![0u8; h * w];
    let mut img = vec![0f32; 3 * h * w];
    let sd = s.image.data();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64, x as f64);
            let (ny, nx) = (sy.round(), sx.round());
            if inside(ny, nx) {
                labels[y * w + x] = s.labels[ny as usize * w + nx as usize];
            }
            if inside(sy, sx) {
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                for c in 0..3 {
                    let p = &sd[c * h * w..(c + 1) * h * w];
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    img[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    let mut out = LaneSample {
        image: Tensor::new(vec![3, h, w], img).expect("same shape"),
        labels,
        exist: s.exist.clone(),
    };
    out.refresh_existence();
    out
}

/// Rotation by `deg` degrees about the image center.
pub fn rotate(s: &LaneSample, deg: f64) -> LaneSample {
    if deg == 0.0 {
        return s.clone();
    }
    let (cy, cx) = ((s.height() - 1) as f64 / 2.0, (s.width() - 1) as f64 / 2.0);
    let (sin, cos) = deg.to_radians().sin_cos();
    warp(s, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
    })
}

/// Crops a `frac`-sized window whose top-left corner sits at
/// `(top, left)` (fractions of the free margin) and scales it back to the
/// full size.
pub fn crop(s: &LaneSample, frac: f64, top: f64, left: f64) -> LaneSample {
    if frac >= 1.0 {
        return s.clone();
    }
    let (h, w) = (s.height() as f64, s.width() as f64);
    let (ch, cw) = (h * frac, w * frac);
    let (oy, ox) = ((h - ch) * top.clamp(0.0, 1.0), (w - cw) * left.clamp(0.0, 1.0));
    warp(s, |y, x| {
        (oy + (y + 0.5) * frac - 0.5, ox + (x + 0.5) * frac - 0.5)
    })
}

pub fn augment<R: Rng>(s: &LaneSample, cfg: &AugmentConfig, rng: &mut R) -> LaneSample {
    let mut out = if cfg.crop_min < 1.0 {
        let f = rng.gen_range(cfg.crop_min.max(0.1)..=1.0);
        crop(s, f, rng.gen(), rng.gen())
    } else {
        s.clone()
    };
    if cfg.rotate_deg > 0.0 {
        out = rotate(&out, rng.gen_range(-cfg.rotate_deg..=cfg.rotate_deg));
    }
    if cfg.hflip && rng.gen_bool(0.5) {
        out = hflip(&out);
    }
    out
}
