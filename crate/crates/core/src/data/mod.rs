//! Synthetic lane scenes, label utilities and the on-disk dataset format.

mod augment;
mod dilate;
mod io;
pub mod pgm;
mod scene;

pub use augment::{augment, crop, hflip, rotate, AugmentConfig};
pub use dilate::{dilate_labels, estimate_lane_width};
pub use io::{read_dataset, read_index, write_dataset, DatasetIndex, IndexEntry};
pub use scene::{generate_dataset, generate_scene, lane_center, sample_seed, SceneParams, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class map: 0 background, `k` for lane slot `k`.
    pub labels: Vec<u8>,
    /// One bit per lane slot.
    pub exist: Vec<u8>,
}

impl LaneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Recomputes `exist` from the labels.
    pub fn refresh_existence(&mut self) {
        self.exist = existence_from_labels(&self.labels, self.exist.len());
    }

    pub fn check(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 || self.labels.len() != s[1] * s[2] {
            return Err(Error::shape(format!(
                "sample image {s:?} does not match {} labels",
                self.labels.len()
            )));
        }
        if existence_from_labels(&self.labels, self.exist.len()) != self.exist {
            return Err(Error::invalid("existence bits disagree with labels"));
        }
        Ok(())
    }
}

/// `bit[k] = 1` iff class `k + 1` occurs.
pub fn existence_from_labels(labels: &[u8], slots: usize) -> Vec<u8> {
    let mut bits = vec![0u8; slots];
    for &l in labels {
        if l > 0 && (l as usize) <= slots {
            bits[l as usize - 1] = 1;
        }
    }
    bits
}

/// Ground-truth lanes as `(slot, points)` with one `(row, mean column)`
/// point per row the lane occupies, bottom row first.
pub fn lanes_from_labels(labels: &[u8], h: usize, w: usize, slots: usize) -> Vec<(usize, Vec<(f64, f64)>)> {
    let mut out = Vec::new();
    for slot in 1..=slots {
        let mut pts = Vec::new();
        for y in (0..h).rev() {
            let row = &labels[y * w..(y + 1) * w];
            let (mut sum, mut n) = (0usize, 0usize);
            for (x, &l) in row.iter().enumerate() {
                if l as usize == slot {
                    sum += x;
                    n += 1;
                }
            }
            if n > 0 {
                pts.push((y as f64, sum as f64 / n as f64));
            }
        }
        if !pts.is_empty() {
            out.push((slot, pts));
        }
    }
    out
}

/// Deterministic 64-bit mixer used to derive per-sample seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
