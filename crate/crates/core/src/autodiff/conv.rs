//! Dilated, strided 2-D cross-correlation with zero padding.
//!
//! Every output element is accumulated as `bias`, then the taps in
//! `(c_in, ky, kx)` lexicographic order, skipping taps that land in the
//! padding. That order is fixed, so results are reproducible bit for bit
//! and agree exactly with a naive per-output loop written in the same order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{adj_mut, nchw, Node, Op, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return Err(Error::shape(format!(
            "kernel span {span} exceeds padded extent {padded}"
        )));
    }
    let room = padded - span;
    if !room.is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "output extent ({len} + 2*{padding} - {dilation}*({k}-1) - 1)/{stride} + 1 is not an integer"
        )));
    }
    Ok(room / stride + 1)
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let (batch, c_in, h, w) = nchw(input_shape)?;
        let &[c_out, kc, kh, kw] = kernel_shape else {
            return Err(Error::shape(format!(
                "kernel must be [C_out, C_in, k, k], got {kernel_shape:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels but input {input_shape:?} has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("only square kernels, got {kh}x{kw}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::shape("stride and dilation must be positive"));
        }
        let out_h = out_extent(h, kh, stride, padding, dilation)?;
        let out_w = out_extent(w, kw, stride, padding, dilation)?;
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            dilation,
            out_h,
            out_w,
        })
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let shift = (kx * self.dilation) as isize - self.padding as isize;
        valid_range(shift, self.stride, self.w, self.out_w)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        let shift = (ky * self.dilation) as isize - self.padding as isize;
        valid_range(shift, self.stride, self.h, self.out_h)
    }
}

/// Indices `o` in `[0, out)` with `0 <= o*stride + shift < len`.
fn valid_range(shift: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let last = len as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.clamp(0, out as isize) as usize;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane_out];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(n * g.c_out + co) * plane_out..][..plane_out];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.c_in {
                let xi = &x[(n * g.c_in + ci) * plane_in..][..plane_in];
                let kw = &k[(co * g.c_in + ci) * kk..][..kk];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_rows(ky);
                    for kx in 0..g.k {
                        let wv = kw[ky * g.k + kx];
                        let (ox_lo, ox_hi) = g.valid_cols(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let col0 = ox_lo * g.stride + kx * g.dilation - g.padding;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let orow = &mut o[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                            let irow = &xi[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let src = &irow[col0..col0 + orow.len()];
                                for (a, &b) in orow.iter_mut().zip(src) {
                                    *a += wv * b;
                                }
                            } else {
                                for (j, a) in orow.iter_mut().enumerate() {
                                    *a += wv * irow[col0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn input_grad<T: Scalar>(g: &ConvGeom, k: &[T], gout: &[T], gx: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    let kk = g.k * g.k;
    for n in 0..g.batch {
        for ci in 0..g.c_in {
            let gxi = &mut gx[(n * g.c_in + ci) * plane_in..][..plane_in];
            for co in 0..g.c_out {
                let go = &gout[(n * g.c_out + co) * plane_out..][..plane_out];
                let kw = &k[(co * g.c_in + ci) * kk..][..kk];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_rows(ky);
                    for kx in 0..g.k {
                        let wv = kw[ky * g.k + kx];
                        let (ox_lo, ox_hi) = g.valid_cols(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let col0 = ox_lo * g.stride + kx * g.dilation - g.padding;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let grow = &go[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                            let xrow = &mut gxi[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let dst = &mut xrow[col0..col0 + grow.len()];
                                for (a, &b) in dst.iter_mut().zip(grow) {
                                    *a += wv * b;
                                }
                            } else {
                                for (j, &b) in grow.iter().enumerate() {
                                    xrow[col0 + j * g.stride] += wv * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes;
/// the summation order is still fixed.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

fn kernel_grad<T: Scalar>(g: &ConvGeom, x: &[T], gout: &[T], gk: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    let kk = g.k * g.k;
    let mut strided = Vec::with_capacity(g.out_w);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let gkw = &mut gk[(co * g.c_in + ci) * kk..][..kk];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_rows(ky);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = g.valid_cols(kx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let col0 = ox_lo * g.stride + kx * g.dilation - g.padding;
                    let mut acc = T::zero();
                    for n in 0..g.batch {
                        let go = &gout[(n * g.c_out + co) * plane_out..][..plane_out];
                        let xi = &x[(n * g.c_in + ci) * plane_in..][..plane_in];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let grow = &go[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                            let xrow = &xi[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                acc += dot(grow, &xrow[col0..col0 + grow.len()]);
                            } else {
                                strided.clear();
                                strided.extend((0..grow.len()).map(|j| xrow[col0 + j * g.stride]));
                                acc += dot(grow, &strided);
                            }
                        }
                    }
                    gkw[ky * g.k + kx] += acc;
                }
            }
        }
    }
}

fn bias_grad<T: Scalar>(g: &ConvGeom, gout: &[T], gb: &mut [T]) {
    let plane_out = g.out_h * g.out_w;
    for n in 0..g.batch {
        for (co, b) in gb.iter_mut().enumerate() {
            let go = &gout[(n * g.c_out + co) * plane_out..][..plane_out];
            *b += go.iter().copied().sum::<T>();
        }
    }
}

pub(crate) fn backward<T: Scalar>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    (input, kernel, bias, geom): (Var, Var, Option<Var>, &ConvGeom),
    gout: &[T],
) {
    let kv = nodes[kernel.0].value.data();
    if let Some(gx) = adj_mut(nodes, adj, input) {
        input_grad(geom, kv, gout, gx);
    }
    let xv = nodes[input.0].value.data();
    if let Some(gk) = adj_mut(nodes, adj, kernel) {
        kernel_grad(geom, xv, gout, gk);
    }
    if let Some(b) = bias {
        if let Some(gb) = adj_mut(nodes, adj, b) {
            bias_grad(geom, gout, gb);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `input` is `[C_in, H, W]` or `[N, C_in, H, W]`; `kernel` is
    /// `[C_out, C_in, k, k]`; `bias`, when given, is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(kernel),
            stride,
            padding,
            dilation,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(format!(
                    "bias must be [{}], got {:?}",
                    geom.c_out,
                    self.shape(b)
                )));
            }
        }
        let out = forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if self.shape(input).len() == 3 {
            vec![geom.c_out, geom.out_h, geom.out_w]
        } else {
            vec![geom.batch, geom.c_out, geom.out_h, geom.out_w]
        };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }
}
