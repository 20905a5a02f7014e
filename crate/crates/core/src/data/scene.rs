//! Perspective lane scenes on a textured ground plane.
//!
//! Lane slot `k` (1-based, left to right) meets the bottom row at
//! `W/2 + (k - (L+1)/2) * spacing` and converges toward the vanishing point.
//! With `t = (y - horizon) / (H - 1 - horizon)` the centerline is
//!
//! ```text
//! x(y) = vx + (bottom_k - vx) * t + 4 (curvature + curvature_k) t (1 - t)
//! ```
//!
//! and is drawn for rows with `t >= top`. Pixel `x` of row `y` carries the
//! lane label when `x(y) - w/2 <= x < x(y) + w/2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{existence_from_labels, splitmix64, LaneSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    /// Occupied slots, 1-based.
    pub lanes: Vec<usize>,
    /// Row of the vanishing point.
    pub horizon: f64,
    /// Column offset of the vanishing point from the image center.
    pub vp_offset: f64,
    pub spacing: f64,
    pub curvature: f64,
    /// Extra bend per slot; empty means none.
    pub lane_curvature: Vec<f64>,
    pub lane_width: f64,
    pub top: f64,
    pub illumination: f64,
    pub occluders: usize,
    pub noise: f64,
    pub dashed: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            seed: 0,
            height: 128,
            width: 256,
            slots: 4,
            lanes: vec![2, 3],
            horizon: 44.0,
            vp_offset: 0.0,
            spacing: 70.0,
            curvature: 0.0,
            lane_curvature: Vec::new(),
            lane_width: 7.0,
            top: 0.15,
            illumination: 1.0,
            occluders: 0,
            noise: 0.0,
            dashed: false,
        }
    }
}

impl SceneParams {
    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::invalid("scene must be at least 4x4"));
        }
        if !(self.lane_width >= 1.0) {
            return Err(Error::invalid(format!("lane width {} < 1 px", self.lane_width)));
        }
        if !(self.horizon >= 0.0 && self.horizon < (self.height - 2) as f64) {
            return Err(Error::invalid(format!("horizon row {} outside the image", self.horizon)));
        }
        if !(0.0..1.0).contains(&self.top) {
            return Err(Error::invalid("top must lie in [0, 1)"));
        }
        if self.slots == 0 || self.slots > 254 {
            return Err(Error::invalid("slot count must be in 1..=254"));
        }
        let mut seen = vec![false; self.slots + 1];
        for &k in &self.lanes {
            if k == 0 || k > self.slots || std::mem::replace(&mut seen[k], true) {
                return Err(Error::invalid(format!("bad lane slot list {:?}", self.lanes)));
            }
        }
        if !self.lane_curvature.is_empty() && self.lane_curvature.len() != self.slots {
            return Err(Error::invalid("lane_curvature needs one entry per slot"));
        }
        Ok(())
    }

    /// First row carrying lane pixels.
    pub fn top_row(&self) -> usize {
        let span = (self.height - 1) as f64 - self.horizon;
        (self.horizon + self.top * span).ceil() as usize
    }
}

/// Centerline column of `slot` at row `y`, or `None` above the lane top.
pub fn lane_center(p: &SceneParams, slot: usize, y: usize) -> Option<f64> {
    if y < p.top_row() || y >= p.height {
        return None;
    }
    let span = (p.height - 1) as f64 - p.horizon;
    let t = (y as f64 - p.horizon) / span;
    let vx = p.width as f64 / 2.0 + p.vp_offset;
    let bottom = p.width as f64 / 2.0 + (slot as f64 - (p.slots as f64 + 1.0) / 2.0) * p.spacing;
    let bend = p.curvature + p.lane_curvature.get(slot - 1).copied().unwrap_or(0.0);
    Some(vx + (bottom - vx) * t + 4.0 * bend * t * (1.0 - t))
}

/// Columns `x` with `c - w/2 <= x < c + w/2`, clipped to the row.
fn band(c: f64, w: f64, width: usize) -> std::ops::Range<usize> {
    let lo = (c - w / 2.0).ceil().max(0.0);
    let hi = (c + w / 2.0).ceil().clamp(0.0, width as f64);
    if lo >= hi {
        return 0..0;
    }
    lo as usize..hi as usize
}

pub fn generate_scene(p: &SceneParams) -> Result<LaneSample> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let mut lanes = p.lanes.clone();
    lanes.sort_unstable();
    for y in p.top_row()..h {
        for pair in lanes.windows(2) {
            let a = lane_center(p, pair[0], y).unwrap();
            let b = lane_center(p, pair[1], y).unwrap();
            if b - a < p.lane_width + 1.0 {
                return Err(Error::InfeasibleScene(format!(
                    "lanes {} and {} are {:.2} px apart at row {y}",
                    pair[0],
                    pair[1],
                    b - a
                )));
            }
        }
    }

    let mut labels = vec![0u8; h * w];
    for &k in &lanes {
        for y in p.top_row()..h {
            let c = lane_center(p, k, y).unwrap();
            for x in band(c, p.lane_width, w) {
                labels[y * w + x] = k as u8;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut img = vec![0f32; 3 * h * w];
    let sky = [0.55, 0.7, 0.9];
    let span = (h - 1) as f64 - p.horizon;
    for y in 0..h {
        for x in 0..w {
            let rgb = if (y as f64) < p.horizon {
                sky
            } else {
                let t = (y as f64 - p.horizon) / span;
                let g = 0.3 + 0.12 * t + rng.gen_range(-0.04..0.04);
                [g, g, g * 1.03]
            };
            for (c, v) in rgb.iter().enumerate() {
                img[(c * h + y) * w + x] = (v * p.illumination) as f32;
            }
        }
    }

    for &k in &lanes {
        let color = if rng.gen_bool(0.3) {
            [0.95, 0.8, 0.25]
        } else {
            [0.95, 0.95, 0.92]
        };
        let phase: f64 = rng.gen_range(0.0..1.0);
        for y in p.top_row()..h {
            if p.dashed {
                let t = (y as f64 - p.horizon) / span;
                // dash length shrinks with distance
                if ((t * t * 10.0 + phase).floor() as i64) % 2 == 1 {
                    continue;
                }
            }
            let c = lane_center(p, k, y).unwrap();
            for x in band(c, p.lane_width, w) {
                for (ch, v) in color.iter().enumerate() {
                    img[(ch * h + y) * w + x] = (v * p.illumination) as f32;
                }
            }
        }
    }

    let road_top = (p.horizon + 0.3 * span).ceil() as usize;
    for _ in 0..p.occluders {
        let rh = rng.gen_range(10..=30usize).min(h - road_top);
        let rw = rng.gen_range(12..=40usize).min(w);
        let y0 = rng.gen_range(road_top..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        let shade: f64 = rng.gen_range(0.08..0.3);
        let tint = [shade, shade * 0.9, shade * 1.2];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for (ch, v) in tint.iter().enumerate() {
                    img[(ch * h + y) * w + x] = (v * p.illumination) as f32;
                }
            }
        }
    }

    if p.noise > 0.0 {
        let n = Normal::new(0.0, p.noise).map_err(|e| Error::invalid(e.to_string()))?;
        for v in img.iter_mut() {
            *v += n.sample(&mut rng) as f32;
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let exist = existence_from_labels(&labels, p.slots);
    Ok(LaneSample {
        image: Tensor::new(vec![3, h, w], img)?,
        labels,
        exist,
    })
}

/// Ranges for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub lane_width: f64,
    /// Presence probability per slot.
    pub lane_prob: Vec<f64>,
    pub spacing: (f64, f64),
    pub horizon_frac: (f64, f64),
    pub vp_jitter: f64,
    pub curvature: f64,
    pub lane_curvature: f64,
    pub illumination: (f64, f64),
    pub max_occluders: usize,
    pub noise: f64,
    pub dashed_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 128,
            width: 256,
            slots: 4,
            lane_width: 7.0,
            lane_prob: vec![0.6, 0.9, 0.9, 0.6],
            spacing: (60.0, 80.0),
            horizon_frac: (0.3, 0.42),
            vp_jitter: 20.0,
            curvature: 30.0,
            lane_curvature: 4.0,
            illumination: (0.6, 1.1),
            max_occluders: 2,
            noise: 0.03,
            dashed_prob: 0.5,
        }
    }
}

impl SynthConfig {
    /// Draws scene parameters from `seed`.
    pub fn sample(&self, seed: u64) -> SceneParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lanes: Vec<usize> = (1..=self.slots)
            .filter(|&k| rng.gen_bool(self.lane_prob.get(k - 1).copied().unwrap_or(0.5).clamp(0.0, 1.0)))
            .collect();
        if lanes.is_empty() {
            lanes.push(rng.gen_range(1..=self.slots));
        }
        let uniform = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if a < b { rng.gen_range(a..b) } else { a };
        let spacing = uniform(&mut rng, self.spacing);
        let horizon = uniform(&mut rng, self.horizon_frac) * self.height as f64;
        let vp_offset = uniform(&mut rng, (-self.vp_jitter, self.vp_jitter));
        let curvature = uniform(&mut rng, (-self.curvature, self.curvature));
        let lane_curvature = (0..self.slots)
            .map(|_| uniform(&mut rng, (-self.lane_curvature, self.lane_curvature)))
            .collect();
        let illumination = uniform(&mut rng, self.illumination);
        let occluders = rng.gen_range(0..=self.max_occluders);
        let dashed = rng.gen_bool(self.dashed_prob.clamp(0.0, 1.0));
        SceneParams {
            seed: rng.gen(),
            height: self.height,
            width: self.width,
            slots: self.slots,
            lanes,
            horizon,
            vp_offset,
            spacing,
            curvature,
            lane_curvature,
            lane_width: self.lane_width,
            top: 0.15,
            illumination,
            occluders,
            noise: self.noise,
            dashed,
        }
    }

    /// A feasible random scene; infeasible draws are retried with a derived
    /// seed.
    pub fn generate(&self, seed: u64) -> Result<LaneSample> {
        let mut s = seed;
        let mut last = None;
        for _ in 0..32 {
            match generate_scene(&self.sample(s)) {
                Ok(sample) => return Ok(sample),
                Err(e @ Error::InfeasibleScene(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
            s = splitmix64(s);
        }
        Err(last.unwrap())
    }
}

/// Seed of sample `i` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ i as u64)
}

/// `n` samples; a pure function of `(n, seed, cfg)`.
pub fn generate_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<(u64, LaneSample)>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = sample_seed(seed, i);
            cfg.generate(s).map(|x| (s, x))
        })
        .collect()
}
