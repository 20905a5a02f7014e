//! From per-lane probability maps and existence scores to lane polylines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::{fit_spline, LanePolyline};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    /// Box filter side; 0 or 1 turns smoothing off.
    pub kernel: usize,
    pub row_stride: usize,
    pub exist_thresh: f64,
    pub point_thresh: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            kernel: 9,
            row_stride: 20,
            exist_thresh: 0.5,
            point_thresh: 0.3,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.row_stride == 0 {
            return Err(Error::invalid("row_stride must be at least 1"));
        }
        if self.kernel > 1 && self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("smoothing kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

/// `k x k` box mean with zero padding, so values near the border shrink.
pub fn smooth(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    assert_eq!(map.len(), h * w, "map does not match {h}x{w}");
    if k <= 1 {
        return map.to_vec();
    }
    let r = (k / 2) as isize;
    // integral image with a zero first row and column
    let iw = w + 1;
    let mut integral = vec![0.0; (h + 1) * iw];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += map[y * w + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
        }
    }
    let area = (k * k) as f64;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (clampi(y as isize - r, h), clampi(y as isize + r + 1, h));
        for x in 0..w {
            let (x0, x1) = (clampi(x as isize - r, w), clampi(x as isize + r + 1, w));
            let s = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0]
                + integral[y0 * iw + x0];
            out[y * w + x] = (s / area).clamp(0.0, 1.0);
        }
    }
    out
}

/// Rows `H-1, H-1-stride, ...` down to 0.
pub fn sampled_rows(h: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1, "row stride must be positive");
    (0..h).rev().step_by(stride).collect()
}

/// Argmax column on every sampled row whose peak reaches `point_thresh`;
/// `None` when the lane is judged absent.
pub fn extract_points(
    map: &[f64],
    h: usize,
    w: usize,
    exist_prob: f64,
    cfg: &PostprocessConfig,
) -> Option<Vec<(f64, f64)>> {
    if exist_prob <= cfg.exist_thresh {
        return None;
    }
    let mut pts = Vec::new();
    for y in sampled_rows(h, cfg.row_stride) {
        let row = &map[y * w..(y + 1) * w];
        let mut best = 0;
        for x in 1..w {
            if row[x] > row[best] {
                best = x;
            }
        }
        if row[best] >= cfg.point_thresh {
            pts.push((y as f64, best as f64));
        }
    }
    Some(pts)
}

/// A detected lane: slot index (1-based, as in the class map) and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub slot: usize,
    pub points: LanePolyline,
}

/// Runs smoothing, point extraction and spline fitting on `probs`
/// (`[C, H, W]`, channel 0 background) with one existence score per lane
/// channel.
pub fn lanes_from_probs(probs: &[f64], h: usize, w: usize, exist: &[f64], cfg: &PostprocessConfig) -> Result<Vec<Lane>> {
    cfg.validate()?;
    let plane = h * w;
    if plane == 0 || !probs.len().is_multiple_of(plane) || probs.len() / plane != exist.len() + 1 {
        return Err(Error::shape(format!(
            "{} probabilities do not hold {} lane maps of {h}x{w} plus background",
            probs.len(),
            exist.len()
        )));
    }
    let mut lanes = Vec::new();
    for (k, &e) in exist.iter().enumerate() {
        let map = &probs[(k + 1) * plane..(k + 2) * plane];
        let smoothed = smooth(map, h, w, cfg.kernel);
        let Some(pts) = extract_points(&smoothed, h, w, e, cfg) else {
            continue;
        };
        if pts.is_empty() {
            continue;
        }
        lanes.push(Lane {
            slot: k + 1,
            points: fit_spline(&pts)?,
        });
    }
    Ok(lanes)
}
