//! Elementwise, reduction, pooling, softmax, normalization and loss
//! primitives, and the backward dispatch for every op.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{adj_mut, conv, nchw, planes, resample, Node, Op, Tape, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Drops the channel axis of a rank-3/4 shape.
fn without_channels(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        3 => shape[1..].to_vec(),
        _ => vec![shape[0], shape[2], shape[3]],
    }
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(self, a, b, what)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::of(scale), T::of(shift));
        self.unary(x, Op::Affine(x, a), |v| a * v + b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// `|x|^p`, elementwise.
    pub fn pow_abs(&mut self, x: Var, p: f64) -> Var {
        let pt = T::of(p);
        if p == 2.0 {
            self.unary(x, Op::PowAbs(x, pt), |v| v * v)
        } else {
            self.unary(x, Op::PowAbs(x, pt), |v| v.abs().powf(pt))
        }
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(x), &[x])
    }

    /// Sum over the channel axis: `[C,H,W] -> [H,W]`, `[N,C,H,W] -> [N,H,W]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&shape)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            let o = &mut out[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let src = &xv[(b * c + ch) * hw..][..hw];
                o.iter_mut().zip(src).for_each(|(a, &s)| *a += s);
            }
        }
        let t = Tensor::new(without_channels(&shape), out)?;
        Ok(self.push(t, Op::SumChannels(x), &[x]))
    }

    /// Max over the channel axis; ties resolve to the lowest channel.
    pub fn max_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&shape)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let mut arg = vec![0u32; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = xv[b * c * hw + p];
                let mut bi = 0;
                for ch in 1..c {
                    let v = xv[(b * c + ch) * hw + p];
                    if v > best {
                        best = v;
                        bi = ch;
                    }
                }
                out[b * hw + p] = best;
                arg[b * hw + p] = bi as u32;
            }
        }
        let t = Tensor::new(without_channels(&shape), out)?;
        Ok(self.push(t, Op::MaxChannels(x, arg), &[x]))
    }

    /// Channel `ch` of a rank-3/4 tensor, with the channel axis dropped.
    pub fn select_channel(&mut self, x: Var, ch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&shape)?;
        if ch >= c {
            return Err(Error::shape(format!("channel {ch} out of range for {shape:?}")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            out.extend_from_slice(&xv[(b * c + ch) * hw..][..hw]);
        }
        let t = Tensor::new(without_channels(&shape), out)?;
        Ok(self.push(t, Op::SelectChannel(x, ch), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (na, ca, ha, wa) = nchw(&sa)?;
        let (nb, cb, hb, wb) = nchw(&sb)?;
        if sa.len() != sb.len() || (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "cannot concatenate channels of {sa:?} and {sb:?}"
            )));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..na {
            out.extend_from_slice(&av[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&bv[n * cb * hw..(n + 1) * cb * hw]);
        }
        let mut shape = sa.clone();
        let r = shape.len();
        shape[r - 3] = ca + cb;
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] -> [N, rest]` for rank 4; everything else flattens to rank 1.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let target = if shape.len() == 4 {
            vec![shape[0], shape[1..].iter().product()]
        } else {
            vec![shape.iter().product()]
        };
        self.reshape(x, &target)
    }

    fn pool_shape(&self, x: Var) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        let (p, h, w) = planes(&shape)?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("cannot 2x2-pool {shape:?}")));
        }
        let mut out = shape.clone();
        let r = out.len();
        out[r - 2] = h / 2;
        out[r - 1] = w / 2;
        Ok((p, h, w, out))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (p, h, w, shape) = self.pool_shape(x)?;
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(p * oh * ow);
        let mut arg = Vec::with_capacity(p * oh * ow);
        for pl in 0..p {
            let src = &xv[pl * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let cands = [
                        (2 * oy) * w + 2 * ox,
                        (2 * oy) * w + 2 * ox + 1,
                        (2 * oy + 1) * w + 2 * ox,
                        (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let mut bi = cands[0];
                    for &c in &cands[1..] {
                        if src[c] > src[bi] {
                            bi = c;
                        }
                    }
                    out.push(src[bi]);
                    arg.push((pl * h * w + bi) as u32);
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2(x, arg), &[x]))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (p, h, w, shape) = self.pool_shape(x)?;
        let (oh, ow) = (h / 2, w / 2);
        let q = T::of(0.25);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(p * oh * ow);
        for pl in 0..p {
            let src = &xv[pl * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = (2 * oy) * w + 2 * ox;
                    out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q);
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool2(x), &[x]))
    }

    /// Softmax over all `H*W` positions of each plane (temperature 1).
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = planes(self.shape(x))?;
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        for plane in out.chunks_exact_mut(hw) {
            softmax_in_place(plane);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::SpatialSoftmax(x), &[x]))
    }

    /// Softmax across channels at every pixel.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&shape)?;
        let out = channel_softmax_values(self.value(x).data(), n, c, h * w);
        Ok(self.push(Tensor::new(shape, out)?, Op::ChannelSoftmax(x), &[x]))
    }

    /// `y = W x + b` with `x` `[in]` or `[N, in]`, `W` `[out, in]`, `b` `[out]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, din) = match *xs {
            [d] => (1, d),
            [n, d] => (n, d),
            _ => return Err(Error::shape(format!("fully_connected input {xs:?}"))),
        };
        let &[dout, win] = &ws[..] else {
            return Err(Error::shape(format!("fully_connected weight {ws:?}")));
        };
        if win != din || self.shape(bias) != [dout] {
            return Err(Error::shape(format!(
                "fully_connected: input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = Vec::with_capacity(n * dout);
        for b in 0..n {
            let xi = &xv[b * din..(b + 1) * din];
            for o in 0..dout {
                let row = &wv[o * din..(o + 1) * din];
                let mut acc = bv[o];
                for (&a, &c) in row.iter().zip(xi) {
                    acc += a * c;
                }
                out.push(acc);
            }
        }
        let shape = if xs.len() == 1 { vec![dout] } else { vec![n, dout] };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
            &[x, weight, bias],
        ))
    }

    fn norm_params_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = nchw(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "channel_norm on {:?} needs [{c}] scale/shift",
                self.shape(x)
            )));
        }
        Ok((n, c, h * w))
    }

    /// Per-channel standardization with batch statistics, followed by a
    /// learned scale and shift. Also returns the batch mean and (biased)
    /// variance per channel.
    pub fn channel_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = self.norm_params_check(x, gamma, beta)?;
        let xv = self.value(x).data();
        let m = T::of((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xv[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut v = T::zero();
            for b in 0..n {
                for &e in &xv[(b * c + ch) * hw..][..hw] {
                    v += (e - mu) * (e - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let (xhat, out) = normalize(
            xv,
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            t,
            Op::NormTrain {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Inference-mode channel norm using stored running statistics.
    pub fn channel_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.norm_params_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("running statistics length mismatch"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let (xhat, out) = normalize(
            self.value(x).data(),
            n,
            c,
            hw,
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::NormEval {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over pixels of `-w(label) * log softmax(logits)[label]`, with the
    /// softmax taken across channels. `labels` has one entry per pixel
    /// (`N*H*W`), `class_weights` one entry per channel.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u8>>,
        class_weights: &[T],
    ) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(logits))?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape(format!(
                "{} labels for {} pixels",
                labels.len(),
                n * hw
            )));
        }
        if class_weights.len() != c {
            return Err(Error::shape("one class weight per channel required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::invalid(format!("label {bad} outside 0..{c}")));
        }
        let probs = channel_softmax_values(self.value(logits).data(), n, c, hw);
        let xv = self.value(logits).data();
        let mut total = T::zero();
        for b in 0..n {
            for p in 0..hw {
                let l = labels[b * hw + p] as usize;
                let base = b * c * hw + p;
                let mut mx = xv[base];
                for ch in 1..c {
                    mx = mx.max(xv[base + ch * hw]);
                }
                let mut se = T::zero();
                for ch in 0..c {
                    se += (xv[base + ch * hw] - mx).exp();
                }
                let logp = xv[base + l * hw] - mx - se.ln();
                total -= class_weights[l] * logp;
            }
        }
        let loss = total / T::of((n * hw) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                probs,
                labels,
                class_weights: class_weights.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy; probabilities are clamped to
    /// `[1e-7, 1 - 1e-7]` before taking logs.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        let pv = self.value(probs).data();
        if pv.len() != targets.len() {
            return Err(Error::shape(format!(
                "{} probabilities vs {} targets",
                pv.len(),
                targets.len()
            )));
        }
        let (lo, hi) = bce_bounds::<T>();
        let mut total = T::zero();
        for (&p, &b) in pv.iter().zip(targets) {
            let q = p.max(lo).min(hi);
            total -= b * q.ln() + (T::one() - b) * (T::one() - q).ln();
        }
        let loss = total / T::of(pv.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
        ))
    }
}

fn bce_bounds<T: Scalar>() -> (T, T) {
    (T::of(1e-7), T::one() - T::of(1e-7))
}

fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let mx = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for e in v.iter_mut() {
        *e = (*e - mx).exp();
        s += *e;
    }
    for e in v.iter_mut() {
        *e /= s;
    }
}

fn channel_softmax_values<T: Scalar>(xv: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = xv[base + p];
            for ch in 1..c {
                mx = mx.max(xv[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (xv[base + ch * hw + p] - mx).exp();
                out[base + ch * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] /= s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn normalize<T: Scalar>(
    xv: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let z = (xv[i] - mean[ch]) * inv_std[ch];
                xhat[i] = z;
                out[i] = gamma[ch] * z + beta[ch];
            }
        }
    }
    (xhat, out)
}

/// Propagates the adjoint `g` of node `i` into its inputs.
pub(crate) fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = adj_mut(nodes, adj, v) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = adj_mut(nodes, adj, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = adj_mut(nodes, adj, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = adj_mut(nodes, adj, *a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            }
            if let Some(d) = adj_mut(nodes, adj, *b) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = adj_mut(nodes, adj, *a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g / y;
                }
            }
            if let Some(d) = adj_mut(nodes, adj, *b) {
                for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                    *d -= g * x / (y * y);
                }
            }
        }
        Op::Affine(x, s) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += *s * g);
            }
        }
        Op::Relu(x) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for ((d, &g), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                    if xv > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                    *d += g / v;
                }
            }
        }
        Op::PowAbs(x, p) => {
            let xv = val(*x);
            let two = T::of(2.0);
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                    let deriv = if *p == two {
                        two * v
                    } else if v == T::zero() {
                        T::zero()
                    } else {
                        *p * v.abs().powf(*p - T::one()) * v.signum()
                    };
                    *d += g * deriv;
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAll(x) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                let s = g[0] / T::of(d.len() as f64);
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumChannels(x) => {
            let (n, c, h, w) = nchw(nodes[x.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut d[(b * c + ch) * hw..][..hw];
                        dst.iter_mut()
                            .zip(&g[b * hw..(b + 1) * hw])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
        Op::MaxChannels(x, arg) => {
            let (_, c, h, w) = nchw(nodes[x.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for (j, (&gj, &a)) in g.iter().zip(arg).enumerate() {
                    let (b, p) = (j / hw, j % hw);
                    d[(b * c + a as usize) * hw + p] += gj;
                }
            }
        }
        Op::SelectChannel(x, ch) => {
            let (n, c, h, w) = nchw(nodes[x.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for b in 0..n {
                    let dst = &mut d[(b * c + ch) * hw..][..hw];
                    dst.iter_mut()
                        .zip(&g[b * hw..(b + 1) * hw])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::ConcatChannels(a, b) => {
            let (n, ca, h, w) = nchw(nodes[a.0].value.shape()).expect("checked in forward");
            let (_, cb, _, _) = nchw(nodes[b.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            let stride = (ca + cb) * hw;
            if let Some(d) = adj_mut(nodes, adj, *a) {
                for s in 0..n {
                    d[s * ca * hw..(s + 1) * ca * hw]
                        .iter_mut()
                        .zip(&g[s * stride..s * stride + ca * hw])
                        .for_each(|(d, &g)| *d += g);
                }
            }
            if let Some(d) = adj_mut(nodes, adj, *b) {
                for s in 0..n {
                    d[s * cb * hw..(s + 1) * cb * hw]
                        .iter_mut()
                        .zip(&g[s * stride + ca * hw..(s + 1) * stride])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => conv::backward(nodes, adj, (*input, *kernel, *bias, geom), g),
        Op::Bilinear(x, plan) => resample::backward(nodes, adj, *x, plan, g),
        Op::MaxPool2(x, arg) => {
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for (&gj, &a) in g.iter().zip(arg) {
                    d[a as usize] += gj;
                }
            }
        }
        Op::AvgPool2(x) => {
            let shape = nodes[x.0].value.shape();
            let (p, h, w) = planes(shape).expect("checked in forward");
            let (oh, ow) = (h / 2, w / 2);
            let q = T::of(0.25);
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for pl in 0..p {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gq = g[(pl * oh + oy) * ow + ox] * q;
                            let i = pl * h * w + (2 * oy) * w + 2 * ox;
                            d[i] += gq;
                            d[i + 1] += gq;
                            d[i + w] += gq;
                            d[i + w + 1] += gq;
                        }
                    }
                }
            }
        }
        Op::SpatialSoftmax(x) => {
            let (_, h, w) = planes(nodes[x.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for ((dp, gp), yp) in d.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).zip(out.chunks_exact(hw)) {
                    let dotgy: T = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum();
                    for ((d, &g), &y) in dp.iter_mut().zip(gp).zip(yp) {
                        *d += y * (g - dotgy);
                    }
                }
            }
        }
        Op::ChannelSoftmax(x) => {
            let (n, c, h, w) = nchw(nodes[x.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            if let Some(d) = adj_mut(nodes, adj, *x) {
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let mut dotgy = T::zero();
                        for ch in 0..c {
                            let k = base + ch * hw + p;
                            dotgy += g[k] * out[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * hw + p;
                            d[k] += out[k] * (g[k] - dotgy);
                        }
                    }
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (xv, wv) = (val(*input), val(*weight));
            let dout = nodes[bias.0].value.len();
            let din = wv.len() / dout;
            let n = xv.len() / din;
            if let Some(d) = adj_mut(nodes, adj, *input) {
                for b in 0..n {
                    for o in 0..dout {
                        let go = g[b * dout + o];
                        let row = &wv[o * din..(o + 1) * din];
                        for (dx, &wi) in d[b * din..(b + 1) * din].iter_mut().zip(row) {
                            *dx += go * wi;
                        }
                    }
                }
            }
            if let Some(d) = adj_mut(nodes, adj, *weight) {
                for b in 0..n {
                    let xi = &xv[b * din..(b + 1) * din];
                    for o in 0..dout {
                        let go = g[b * dout + o];
                        for (dw, &x) in d[o * din..(o + 1) * din].iter_mut().zip(xi) {
                            *dw += go * x;
                        }
                    }
                }
            }
            if let Some(d) = adj_mut(nodes, adj, *bias) {
                for b in 0..n {
                    for o in 0..dout {
                        d[o] += g[b * dout + o];
                    }
                }
            }
        }
        Op::NormTrain {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm_backward(nodes, adj, (*input, *gamma, *beta), xhat, inv_std, g, true),
        Op::NormEval {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm_backward(nodes, adj, (*input, *gamma, *beta), xhat, inv_std, g, false),
        Op::WeightedCe {
            logits,
            probs,
            labels,
            class_weights,
        } => {
            let (n, c, h, w) = nchw(nodes[logits.0].value.shape()).expect("checked in forward");
            let hw = h * w;
            let scale = g[0] / T::of((n * hw) as f64);
            if let Some(d) = adj_mut(nodes, adj, *logits) {
                for b in 0..n {
                    for p in 0..hw {
                        let l = labels[b * hw + p] as usize;
                        let wl = class_weights[l] * scale;
                        for ch in 0..c {
                            let k = b * c * hw + ch * hw + p;
                            let onehot = if ch == l { T::one() } else { T::zero() };
                            d[k] += wl * (probs[k] - onehot);
                        }
                    }
                }
            }
        }
        Op::Bce { probs, targets } => {
            let pv = val(*probs);
            let (lo, hi) = bce_bounds::<T>();
            let scale = g[0] / T::of(pv.len() as f64);
            if let Some(d) = adj_mut(nodes, adj, *probs) {
                for ((d, &p), &b) in d.iter_mut().zip(pv).zip(targets) {
                    if p > lo && p < hi {
                        *d += scale * (-b / p + (T::one() - b) / (T::one() - p));
                    }
                }
            }
        }
    }
}

fn norm_backward<T: Scalar>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    (input, gamma, beta): (Var, Var, Var),
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    batch_stats: bool,
) {
    let (n, c, h, w) = nchw(nodes[input.0].value.shape()).expect("checked in forward");
    let hw = h * w;
    let gam = nodes[gamma.0].value.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    if let Some(d) = adj_mut(nodes, adj, gamma) {
        d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
    }
    if let Some(d) = adj_mut(nodes, adj, beta) {
        d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
    }
    if let Some(d) = adj_mut(nodes, adj, input) {
        let m = T::of((n * hw) as f64);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let k = gam[ch] * inv_std[ch];
                if batch_stats {
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for i in off..off + hw {
                        d[i] += k * (g[i] - mg - xhat[i] * mgx);
                    }
                } else {
                    for i in off..off + hw {
                        d[i] += k * g[i];
                    }
                }
            }
        }
    }
}
