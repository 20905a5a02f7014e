//! Library routines against straightforward reference implementations:
//! convolution loops, a dense spline solve, a brute-force distance
//! transform and pixel counting for lane matching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadkit::autodiff::Tape;
use sadkit::data::dilate_labels;
use sadkit::metrics::{culane_counts, culane_f1, LaneCounts};
use sadkit::spline::{fit_spline, NaturalSpline};
use sadkit::tensor::Tensor;

use crate::common::tiny_data;

#[allow(clippy::too_many_arguments)]
fn conv_loops(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, ks): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - dil * (ks - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (ks - 1) - 1) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb[o]);
                    for c in 0..cin {
                        for i in 0..ks {
                            for j in 0..ks {
                                let sy = (y * stride + i * dil) as isize - pad as isize;
                                let sx = (xo * stride + j * dil) as isize - pad as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += x[((b * cin + c) * h + sy as usize) * w + sx as usize]
                                        * k[((o * cin + c) * ks + i) * ks + j];
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

/// Small integers keep every partial sum exact, so any summation order
/// must agree bit for bit.
fn conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ints = |n: usize, r: i32, rng: &mut ChaCha8Rng| (0..n).map(|_| f64::from(rng.gen_range(-r..=r))).collect::<Vec<_>>();
    for _ in 0..60 {
        let (n, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
        let ks = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let dil = rng.gen_range(1..4);
        let pad = rng.gen_range(0..5);
        let span = dil * (ks - 1) + 1;
        let side = |o: usize| ((o - 1) * stride + span).saturating_sub(2 * pad).max(1);
        let (mut h, mut w) = (side(rng.gen_range(1..7)), side(rng.gen_range(1..7)));
        while h + 2 * pad < span || (h + 2 * pad - span) % stride != 0 {
            h += 1;
        }
        while w + 2 * pad < span || (w + 2 * pad - span) % stride != 0 {
            w += 1;
        }
        let x = ints(n * cin * h * w, 9, &mut rng);
        let k = ints(cout * cin * ks * ks, 4, &mut rng);
        let b = ints(cout, 5, &mut rng);
        let with_bias = rng.gen_bool(0.5);

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![n, cin, h, w], x.clone()).unwrap());
        let kv = tape.constant(Tensor::new(vec![cout, cin, ks, ks], k.clone()).unwrap());
        let bv = tape.constant(Tensor::new(vec![cout], b.clone()).unwrap());
        let y = tape.conv2d(xv, kv, with_bias.then_some(bv), stride, pad, dil).unwrap();
        let expect = conv_loops(&x, (n, cin, h, w), &k, (cout, ks), with_bias.then_some(&b[..]), stride, pad, dil);
        assert_eq!(tape.value(y).data(), &expect[..]);
    }
}

/// Dense natural-spline system with partial-pivot elimination.
fn dense_second_derivatives(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    a[0][0] = 1.0;
    a[n - 1][n - 1] = 1.0;
    for i in 1..n - 1 {
        let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
        a[i][i - 1] = h0;
        a[i][i] = 2.0 * (h0 + h1);
        a[i][i + 1] = h1;
        a[i][n] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                let pivot = a[col].clone();
                for (dst, src) in a[r][col..].iter_mut().zip(&pivot[col..]) {
                    *dst -= f * src;
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

fn cubic_at(xs: &[f64], ys: &[f64], m: &[f64], x: f64) -> f64 {
    let i = xs.windows(2).position(|p| x <= p[1]).unwrap_or(xs.len() - 2);
    let h = xs[i + 1] - xs[i];
    let (a, b) = ((xs[i + 1] - x) / h, (x - xs[i]) / h);
    a * ys[i] + b * ys[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
}

fn spline() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let n = rng.gen_range(2..20);
        let mut x = rng.gen_range(0.0..10.0);
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                x += rng.gen_range(0.5..25.0);
                x
            })
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..256.0)).collect();
        let s = NaturalSpline::new(&xs, &ys).unwrap();
        let m = dense_second_derivatives(&xs, &ys);
        for (a, b) in s.second_derivatives().iter().zip(&m) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
        for k in 0..=100 {
            let t = xs[0] + (xs[n - 1] - xs[0]) * k as f64 / 100.0;
            assert!((s.eval(t) - cubic_at(&xs, &ys, &m, t)).abs() <= 1e-9);
        }
        // the lane wrapper fits col = f(row) through the same knots
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        let lane = fit_spline(&pts).unwrap();
        for &(r, c) in &pts {
            assert!((lane.column_at(r).unwrap() - c).abs() <= 1e-9);
        }
    }
}

fn median_run(labels: &[u8], h: usize, w: usize) -> f64 {
    let mut runs = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let (l, start) = (labels[y * w + x], x);
            while x < w && labels[y * w + x] == l {
                x += 1;
            }
            if l != 0 {
                runs.push(x - start);
            }
        }
    }
    runs.sort_unstable();
    let k = runs.len();
    if k % 2 == 1 {
        runs[k / 2] as f64
    } else {
        (runs[k / 2 - 1] + runs[k / 2]) as f64 / 2.0
    }
}

/// Exact Euclidean distance transform by exhaustive search.
fn dilate_brute(labels: &[u8], h: usize, w: usize, width: usize) -> Vec<u8> {
    let r = (width as f64 - median_run(labels, h, w)) / 2.0;
    if r <= 0.0 {
        return labels.to_vec();
    }
    let lane: Vec<(usize, usize, u8)> = (0..h * w)
        .filter(|&i| labels[i] != 0)
        .map(|i| (i / w, i % w, labels[i]))
        .collect();
    let mut out = labels.to_vec();
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != 0 {
                continue;
            }
            let nearest = lane
                .iter()
                .map(|&(ly, lx, l)| ((ly as f64 - y as f64).powi(2) + (lx as f64 - x as f64).powi(2), l))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((d2, l)) = nearest {
                if d2 <= r * r {
                    out[y * w + x] = l;
                }
            }
        }
    }
    out
}

fn dilation() {
    for (i, s) in tiny_data(12, 33).iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        for width in [3, 5, 8, 13] {
            assert_eq!(dilate_labels(&s.labels, h, w, width), dilate_brute(&s.labels, h, w, width), "scene {i} width {width}");
        }
    }
}

const H: usize = 60;
const W: usize = 420;
const BAND: i64 = 30;

/// Vertical lane at an integer column over rows `top..=bottom`.
fn vertical(col: i64, top: i64, bottom: i64) -> (i64, i64, i64) {
    (col, top, bottom)
}

fn band_pixels(l: (i64, i64, i64)) -> i64 {
    BAND * (l.2 - l.1 + 1)
}

fn overlap(a: (i64, i64, i64), b: (i64, i64, i64)) -> i64 {
    let cols = (BAND - (a.0 - b.0).abs()).max(0);
    let rows = (a.2.min(b.2) - a.1.max(b.1) + 1).max(0);
    cols * rows
}

/// 50 constructed image pairs. GT lanes sit 100 px apart; each prediction
/// is a shifted, re-spanned copy (or absent), and stray predictions land
/// halfway between GT lanes, so every pair's counts follow from pixel
/// arithmetic alone.
fn lane_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for case in 0..50 {
        let k = rng.gen_range(0..=4);
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        let mut expect = LaneCounts::default();
        for j in 0..k {
            let top = rng.gen_range(0..30);
            let g = vertical(50 + 100 * j, top, rng.gen_range(top + 5..H as i64));
            gt.push(g);
            if rng.gen_bool(0.8) {
                let top = (g.1 + rng.gen_range(-10..10)).clamp(0, H as i64 - 6);
                let p = vertical(g.0 + rng.gen_range(-40..=40), top, rng.gen_range(top + 5..H as i64));
                pred.push(p);
                let i = overlap(p, g);
                let iou = i as f64 / (band_pixels(p) + band_pixels(g) - i) as f64;
                if iou > 0.5 {
                    expect.tp += 1;
                } else {
                    expect.fp += 1;
                    expect.fn_ += 1;
                }
            } else {
                expect.fn_ += 1;
            }
        }
        for j in 0..rng.gen_range(0..3) {
            let top = rng.gen_range(0..40);
            pred.push(vertical(100 + 100 * j, top, rng.gen_range(top + 5..H as i64)));
            expect.fp += 1;
        }
        let poly = |ls: &[(i64, i64, i64)]| {
            ls.iter()
                .map(|&(c, t, b)| fit_spline(&[(b as f64, c as f64), (t as f64, c as f64)]).unwrap())
                .collect::<Vec<_>>()
        };
        let (p, g) = (poly(&pred), poly(&gt));
        assert_eq!(culane_counts(&p, &g, BAND as f64, 0.5, H, W), expect, "case {case}");
        assert_eq!(culane_f1(&p, &g, BAND as f64, 0.5, H, W), expect.scores());
    }
}

pub fn all() {
    conv2d();
    spline();
    dilation();
    lane_matching();
}
