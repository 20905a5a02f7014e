//! Activation-based attention maps.
//!
//! Every mapping collapses the channel axis of an activation `[C,H,W]` (or
//! batched `[N,C,H,W]`) into a nonnegative map `[H,W]` (`[N,H,W]`).
//! [`atgen`] turns an activation into a normalized attention map:
//! squared-magnitude channel sum, bilinear resize only when the size differs
//! from the target, then a softmax over all spatial positions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Channel-collapsing statistic used to build an attention map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mapping {
    Sum,
    SumP { p: f64 },
    MaxP { p: f64 },
}

impl Default for Mapping {
    fn default() -> Self {
        Mapping::SumP { p: 2.0 }
    }
}

/// Per-pixel `sum_c |A_c|`.
pub fn g_sum<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let abs = tape.pow_abs(a, 1.0);
    tape.sum_channels(abs)
}

/// Per-pixel `sum_c |A_c|^p`, `p > 1`.
pub fn g_sum_p<T: Scalar>(tape: &mut Tape<T>, a: Var, p: f64) -> Result<Var> {
    if !(p > 1.0) {
        return Err(Error::invalid(format!(
            "g_sum_p needs p > 1 (use g_sum for p = 1), got {p}"
        )));
    }
    let powed = tape.pow_abs(a, p);
    tape.sum_channels(powed)
}

/// Per-pixel `max_c |A_c|^p`, `p >= 1`.
pub fn g_max_p<T: Scalar>(tape: &mut Tape<T>, a: Var, p: f64) -> Result<Var> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("g_max_p needs p >= 1, got {p}")));
    }
    let powed = tape.pow_abs(a, p);
    tape.max_channels(powed)
}

pub fn apply_mapping<T: Scalar>(tape: &mut Tape<T>, a: Var, mapping: Mapping) -> Result<Var> {
    match mapping {
        Mapping::Sum => g_sum(tape, a),
        Mapping::SumP { p } => g_sum_p(tape, a, p),
        Mapping::MaxP { p } => g_max_p(tape, a, p),
    }
}

/// Normalized attention map with an arbitrary mapping.
pub fn attention_map<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    mapping: Mapping,
    target_h: usize,
    target_w: usize,
) -> Result<Var> {
    let g = apply_mapping(tape, a, mapping)?;
    let b = tape.bilinear_upsample(g, target_h, target_w)?;
    tape.spatial_softmax(b)
}

/// The distillation attention map: `softmax(resize(sum_c A_c^2))`.
pub fn atgen<T: Scalar>(tape: &mut Tape<T>, a: Var, target_h: usize, target_w: usize) -> Result<Var> {
    attention_map(tape, a, Mapping::SumP { p: 2.0 }, target_h, target_w)
}

/// Spatial size `(H, W)` of a `[C,H,W]` or `[N,C,H,W]` activation.
pub fn spatial_size<T: Scalar>(tape: &Tape<T>, a: Var) -> Result<(usize, usize)> {
    match *tape.shape(a) {
        [_, h, w] | [_, _, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(format!("activation must be rank 3 or 4, got {s:?}"))),
    }
}
