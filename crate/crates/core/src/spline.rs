//! Natural cubic splines `col = f(row)` and lane polylines built on them.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Interpolating cubic with zero second derivative at both ends. Outside
/// the knot range the end segments continue as straight lines.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    /// Knots must have strictly increasing `x`.
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::invalid("a spline needs at least two knots with one value each"));
        }
        if xs.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::invalid("spline knots must be strictly increasing"));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for m[1..n-1] (Thomas algorithm).
            let k = n - 2;
            let h: Vec<f64> = xs.windows(2).map(|p| p[1] - p[0]).collect();
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                upper[i] = h[i + 1];
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
            }
            for i in 1..k {
                let f = h[i] / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(NaturalSpline {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        })
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.xs, &self.ys)
    }

    pub fn second_derivatives(&self) -> &[f64] {
        &self.m
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let (xs, ys, m) = (&self.xs, &self.ys, &self.m);
        if x <= xs[0] {
            let h = xs[1] - xs[0];
            let slope = (ys[1] - ys[0]) / h - h * (2.0 * m[0] + m[1]) / 6.0;
            return ys[0] + slope * (x - xs[0]);
        }
        if x >= xs[n - 1] {
            let h = xs[n - 1] - xs[n - 2];
            let slope = (ys[n - 1] - ys[n - 2]) / h + h * (2.0 * m[n - 1] + m[n - 2]) / 6.0;
            return ys[n - 1] + slope * (x - xs[n - 1]);
        }
        let i = xs.partition_point(|&k| k <= x) - 1;
        let h = xs[i + 1] - xs[i];
        let a = (xs[i + 1] - x) / h;
        let b = (x - xs[i]) / h;
        a * ys[i] + b * ys[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
    }
}

/// Lane points `(row, col)`, bottom row first, plus the fitted spline
/// `col = f(row)`. A lane with one point has no spline.
#[derive(Clone, Debug, PartialEq)]
pub struct LanePolyline {
    points: Vec<(f64, f64)>,
    spline: Option<NaturalSpline>,
}

impl LanePolyline {
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn spline(&self) -> Option<&NaturalSpline> {
        self.spline.as_ref()
    }

    /// Row span `(min, max)` covered by the points.
    pub fn row_range(&self) -> (f64, f64) {
        let lo = self.points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = self.points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Column at `row` if `row` lies within the lane's row span.
    pub fn column_at(&self, row: f64) -> Option<f64> {
        let (lo, hi) = self.row_range();
        if row < lo || row > hi {
            return None;
        }
        Some(match &self.spline {
            Some(s) => s.eval(row),
            None => self.points[0].1,
        })
    }

    /// Dense polyline: the spline evaluated at every integer row of the
    /// span (the bare point for a degenerate lane).
    pub fn densify(&self) -> Vec<(f64, f64)> {
        let Some(s) = &self.spline else {
            return self.points.clone();
        };
        let (lo, hi) = self.row_range();
        let mut out = Vec::new();
        let mut r = hi;
        while r >= lo {
            out.push((r, s.eval(r)));
            r -= 1.0;
        }
        if out.last().map(|p| p.0) != Some(lo) {
            out.push((lo, s.eval(lo)));
        }
        out
    }
}

/// Fits a natural spline through `points` (any order, distinct rows). One
/// point yields a degenerate lane without a spline.
pub fn fit_spline(points: &[(f64, f64)]) -> Result<LanePolyline> {
    if points.is_empty() {
        return Err(Error::invalid("cannot fit a lane through zero points"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    if pts.windows(2).any(|p| p[0].0 == p[1].0) {
        return Err(Error::invalid("lane points must have distinct rows"));
    }
    let spline = if pts.len() >= 2 {
        let xs: Vec<f64> = pts.iter().rev().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().rev().map(|p| p.1).collect();
        Some(NaturalSpline::new(&xs, &ys)?)
    } else {
        None
    };
    Ok(LanePolyline { points: pts, spline })
}

impl Serialize for LanePolyline {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pts: Vec<[f64; 2]> = self.points.iter().map(|&(r, c)| [r, c]).collect();
        pts.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LanePolyline {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pts = Vec::<[f64; 2]>::deserialize(d)?;
        let pts: Vec<(f64, f64)> = pts.into_iter().map(|[r, c]| (r, c)).collect();
        fit_spline(&pts).map_err(serde::de::Error::custom)
    }
}
