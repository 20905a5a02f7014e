//! Bilinear resampling with pixel-center alignment and edge clamping.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{adj_mut, planes, Node, Op, Tape, Var};

/// Source coordinate sampled by output index `i`:
/// `(i + 0.5) * in_len / out_len - 0.5`, clamped to `[0, in_len - 1]`.
pub fn bilinear_source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

#[derive(Debug)]
pub(crate) struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let mut taps = Taps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for i in 0..out_len {
            let s = bilinear_source_coord(i, in_len, out_len);
            let lo = s.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(in_len - 1));
            taps.frac.push(s - lo as f64);
        }
        taps
    }
}

#[derive(Debug)]
pub(crate) struct BilinearPlan {
    in_h: usize,
    in_w: usize,
    rows: Taps,
    cols: Taps,
}

impl BilinearPlan {
    fn forward<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let out_w = self.cols.lo.len();
        for (oy, drow) in dst.chunks_exact_mut(out_w).enumerate() {
            let fy = T::of(self.rows.frac[oy]);
            let r0 = &src[self.rows.lo[oy] * self.in_w..][..self.in_w];
            let r1 = &src[self.rows.hi[oy] * self.in_w..][..self.in_w];
            for (ox, d) in drow.iter_mut().enumerate() {
                let fx = T::of(self.cols.frac[ox]);
                let (x0, x1) = (self.cols.lo[ox], self.cols.hi[ox]);
                let top = r0[x0] * (T::one() - fx) + r0[x1] * fx;
                let bot = r1[x0] * (T::one() - fx) + r1[x1] * fx;
                *d = top * (T::one() - fy) + bot * fy;
            }
        }
    }

    fn backward<T: Scalar>(&self, gout: &[T], gsrc: &mut [T]) {
        let out_w = self.cols.lo.len();
        for (oy, grow) in gout.chunks_exact(out_w).enumerate() {
            let fy = T::of(self.rows.frac[oy]);
            let (y0, y1) = (self.rows.lo[oy], self.rows.hi[oy]);
            for (ox, &g) in grow.iter().enumerate() {
                let fx = T::of(self.cols.frac[ox]);
                let (x0, x1) = (self.cols.lo[ox], self.cols.hi[ox]);
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                gsrc[y0 * self.in_w + x0] += gt * (T::one() - fx);
                gsrc[y0 * self.in_w + x1] += gt * fx;
                gsrc[y1 * self.in_w + x0] += gb * (T::one() - fx);
                gsrc[y1 * self.in_w + x1] += gb * fx;
            }
        }
    }
}

pub(crate) fn backward<T: Scalar>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    input: Var,
    plan: &BilinearPlan,
    gout: &[T],
) {
    let Some(gx) = adj_mut(nodes, adj, input) else {
        return;
    };
    let in_plane = plan.in_h * plan.in_w;
    let out_plane = plan.rows.lo.len() * plan.cols.lo.len();
    for (gsrc, g) in gx.chunks_exact_mut(in_plane).zip(gout.chunks_exact(out_plane)) {
        plan.backward(g, gsrc);
    }
}

impl<T: Scalar> Tape<T> {
    /// Resizes the last two axes to `out_h x out_w`. Returns `input` itself
    /// when the size already matches.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear target size must be positive"));
        }
        let (p, h, w) = planes(self.shape(input))?;
        if (h, w) == (out_h, out_w) {
            return Ok(input);
        }
        let plan = BilinearPlan {
            in_h: h,
            in_w: w,
            rows: Taps::new(h, out_h),
            cols: Taps::new(w, out_w),
        };
        let src = self.value(input).data();
        let mut out = vec![T::zero(); p * out_h * out_w];
        for (s, d) in src
            .chunks_exact(h * w)
            .zip(out.chunks_exact_mut(out_h * out_w))
        {
            plan.forward(s, d);
        }
        let mut shape = self.shape(input).to_vec();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Bilinear(input, Arc::new(plan)),
            &[input],
        ))
    }
}
