//! Lane metrics: point accuracy with tolerance, band-IoU F1 and pixel
//! scores on binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::LanePolyline;

/// Every family is optional so one report type serves all evaluations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fn_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lane_iou: Option<f64>,
}

/// Matched and unmatched lane counts, summed over images before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LaneCounts {
    pub fn add(&mut self, o: LaneCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// `(precision, recall, f1)`. With nothing predicted and nothing to
    /// find all three are 1; otherwise empty denominators give 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        if self.tp + self.fp + self.fn_ == 0 {
            return (1.0, 1.0, 1.0);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, f1_score(p, r))
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Lane as a band: on each integer row of its span, the pixels `x` with
/// `c - width/2 <= x < c + width/2` around the lane column `c`.
pub fn rasterize_lane(lane: &LanePolyline, width_px: f64, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let (lo, hi) = lane.row_range();
    let first = lo.ceil().max(0.0);
    let last = hi.floor().min(h as f64 - 1.0);
    if first > last {
        return mask;
    }
    for y in first as usize..=last as usize {
        let Some(mut c) = lane.column_at(y as f64) else {
            continue;
        };
        // spline evaluation noise must not move a band edge by a pixel
        if (c - c.round()).abs() < 1e-9 {
            c = c.round();
        }
        let x0 = (c - width_px / 2.0).ceil().max(0.0);
        let x1 = (c + width_px / 2.0).ceil().min(w as f64);
        if x0 >= x1 {
            continue;
        }
        for x in x0 as usize..x1 as usize {
            mask[y * w + x] = true;
        }
    }
    mask
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching on descending IoU; pairs above `iou_thresh`
/// are true positives.
pub fn culane_counts(
    pred: &[LanePolyline],
    gt: &[LanePolyline],
    line_width_px: f64,
    iou_thresh: f64,
    h: usize,
    w: usize,
) -> LaneCounts {
    let pm: Vec<Vec<bool>> = pred.iter().map(|l| rasterize_lane(l, line_width_px, h, w)).collect();
    let gm: Vec<Vec<bool>> = gt.iter().map(|l| rasterize_lane(l, line_width_px, h, w)).collect();
    let mut pairs = Vec::new();
    for (i, p) in pm.iter().enumerate() {
        for (j, g) in gm.iter().enumerate() {
            let iou = mask_iou(p, g);
            if iou > iou_thresh {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            tp += 1;
        }
    }
    LaneCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

/// `(precision, recall, f1)` for one image.
pub fn culane_f1(
    pred: &[LanePolyline],
    gt: &[LanePolyline],
    line_width_px: f64,
    iou_thresh: f64,
    h: usize,
    w: usize,
) -> (f64, f64, f64) {
    culane_counts(pred, gt, line_width_px, iou_thresh, h, w).scores()
}

/// Point tallies behind [`tusimple_accuracy`], kept so several images can
/// be pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointCounts {
    pub correct: usize,
    pub total: usize,
    pub pred_lanes: usize,
    pub unmatched_pred: usize,
    pub gt_lanes: usize,
    pub unmatched_gt: usize,
}

impl PointCounts {
    pub fn add(&mut self, o: PointCounts) {
        self.correct += o.correct;
        self.total += o.total;
        self.pred_lanes += o.pred_lanes;
        self.unmatched_pred += o.unmatched_pred;
        self.gt_lanes += o.gt_lanes;
        self.unmatched_gt += o.unmatched_gt;
    }

    /// `(accuracy, fp, fn)`.
    pub fn rates(&self) -> Result<(f64, f64, f64)> {
        if self.total == 0 {
            return Err(Error::UndefinedMetric("accuracy needs at least one ground-truth point".into()));
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok((
            self.correct as f64 / self.total as f64,
            frac(self.unmatched_pred, self.pred_lanes),
            frac(self.unmatched_gt, self.gt_lanes),
        ))
    }
}

/// Ground-truth points of `gt` hit by `pred` within `tol_px` columns.
fn hits(pred: &LanePolyline, gt: &[(f64, f64)], tol_px: f64) -> usize {
    gt.iter()
        .filter(|&&(r, c)| pred.column_at(r).is_some_and(|p| (p - c).abs() <= tol_px))
        .count()
}

pub fn tusimple_counts(pred: &[LanePolyline], gt: &[Vec<(f64, f64)>], tol_px: f64) -> PointCounts {
    let mut counts = PointCounts {
        pred_lanes: pred.len(),
        gt_lanes: gt.len(),
        ..Default::default()
    };
    let mut pred_matched = vec![false; pred.len()];
    for g in gt {
        counts.total += g.len();
        let mut best = 0;
        for (i, p) in pred.iter().enumerate() {
            let n = hits(p, g, tol_px);
            if !g.is_empty() && 2 * n >= g.len() {
                pred_matched[i] = true;
            }
            best = best.max(n);
        }
        counts.correct += best;
        if g.is_empty() || 2 * best < g.len() {
            counts.unmatched_gt += 1;
        }
    }
    counts.unmatched_pred = pred_matched.iter().filter(|m| !**m).count();
    counts
}

/// Each ground-truth lane is scored by its best prediction. A lane pair
/// matches when at least half of the ground-truth points are hit.
pub fn tusimple_accuracy(pred: &[LanePolyline], gt: &[Vec<(f64, f64)>], tol_px: f64) -> Result<(f64, f64, f64)> {
    tusimple_counts(pred, gt, tol_px).rates()
}

/// Lane-class tallies over binary masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub inter: usize,
    pub union: usize,
    pub gt: usize,
}

impl PixelCounts {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
        }
        let mut c = PixelCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.inter += (p && g) as usize;
            c.union += (p || g) as usize;
            c.gt += g as usize;
        }
        Ok(c)
    }

    pub fn add(&mut self, o: PixelCounts) {
        self.inter += o.inter;
        self.union += o.union;
        self.gt += o.gt;
    }

    /// `(pixel_accuracy, lane_iou)`, accuracy normalized by ground-truth
    /// lane pixels.
    pub fn scores(&self) -> Result<(f64, f64)> {
        if self.gt == 0 {
            return Err(Error::UndefinedMetric("no ground-truth lane pixels".into()));
        }
        Ok((self.inter as f64 / self.gt as f64, self.inter as f64 / self.union as f64))
    }
}

pub fn pixel_metrics(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    PixelCounts::from_masks(pred, gt)?.scores()
}
