//! Running a model on images and scoring its lanes against labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{lanes_from_labels, LaneSample};
use crate::error::{Error, Result};
use crate::metrics::{culane_counts, tusimple_counts, LaneCounts, MetricReport, PixelCounts, PointCounts};
use crate::model::Model;
use crate::postprocess::{lanes_from_probs, Lane, PostprocessConfig};
use crate::spline::{fit_spline, LanePolyline};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub line_width_px: f64,
    pub iou_thresh: f64,
    pub tusimple_tol_px: f64,
    /// Images per forward pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            line_width_px: 30.0,
            iou_thresh: 0.5,
            tusimple_tol_px: 20.0,
            batch_size: 8,
        }
    }
}

/// Per-class probabilities `[C, H, W]` and one existence score per lane.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor<f64>,
    pub exist: Vec<f64>,
}

impl Prediction {
    /// Pixels whose most likely class is a lane (ties: lower class).
    pub fn lane_mask(&self) -> Vec<bool> {
        let s = self.probs.shape();
        let (c, plane) = (s[0], s[1] * s[2]);
        let p = self.probs.data();
        (0..plane)
            .map(|i| {
                let mut best = 0;
                for k in 1..c {
                    if p[k * plane + i] > p[best * plane + i] {
                        best = k;
                    }
                }
                best != 0
            })
            .collect()
    }

    pub fn lanes(&self, cfg: &PostprocessConfig) -> Result<Vec<Lane>> {
        let s = self.probs.shape();
        lanes_from_probs(self.probs.data(), s[1], s[2], &self.exist, cfg)
    }
}

/// Eval-mode forward pass over `images` (`[3,H,W]` each), batched.
pub fn predict<T: Scalar>(model: &Model<T>, images: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Prediction>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let slots = model.config().lane_slots;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size) {
        let batch = Tensor::stack(chunk)?.cast::<T>();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let x = tape.constant(batch);
        let fwd = model.forward(&mut tape, &vars, x, false)?;
        let logits = tape.value(fwd.seg_logits);
        let s = logits.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for n in 0..chunk.len() {
            let l = &logits.data()[n * c * plane..(n + 1) * c * plane];
            let mut probs = vec![0.0; c * plane];
            for i in 0..plane {
                let m = (0..c).map(|k| l[k * plane + i].f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (l[k * plane + i].f64() - m).exp();
                    probs[k * plane + i] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[k * plane + i] /= z;
                }
            }
            let exist = match fwd.exist_probs {
                Some(e) => tape.value(e).data()[n * slots..(n + 1) * slots].iter().map(|v| v.f64()).collect(),
                None => vec![1.0; slots],
            };
            out.push(Prediction {
                probs: Tensor::new(vec![c, s[2], s[3]], probs)?,
                exist,
            });
        }
    }
    Ok(out)
}

/// The labels themselves as a prediction: one-hot probabilities and the
/// true existence bits.
pub fn oracle_prediction(sample: &LaneSample) -> Prediction {
    let (h, w) = (sample.height(), sample.width());
    let c = sample.exist.len() + 1;
    let mut probs = vec![0.0; c * h * w];
    for (i, &l) in sample.labels.iter().enumerate() {
        probs[l as usize * h * w + i] = 1.0;
    }
    Prediction {
        probs: Tensor::new(vec![c, h, w], probs).expect("sizes agree"),
        exist: sample.exist.iter().map(|&b| b as f64).collect(),
    }
}

/// Ground-truth lane centerlines (mean column per labeled row).
pub fn gt_points(sample: &LaneSample) -> Vec<Vec<(f64, f64)>> {
    lanes_from_labels(&sample.labels, sample.height(), sample.width(), sample.exist.len())
        .into_iter()
        .map(|(_, p)| p)
        .collect()
}

pub fn gt_lanes(sample: &LaneSample) -> Result<Vec<LanePolyline>> {
    gt_points(sample).iter().map(|p| fit_spline(p)).collect()
}

/// Pooled tallies across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub lanes: LaneCounts,
    pub points: PointCounts,
    pub pixels: PixelCounts,
}

impl EvalCounts {
    pub fn add(&mut self, o: EvalCounts) {
        self.lanes.add(o.lanes);
        self.points.add(o.points);
        self.pixels.add(o.pixels);
    }

    /// Families whose metric is undefined on this data are left out.
    pub fn report(&self) -> MetricReport {
        let (p, r, f1) = self.lanes.scores();
        let mut rep = MetricReport {
            precision: Some(p),
            recall: Some(r),
            f1: Some(f1),
            ..Default::default()
        };
        if let Ok((a, fp, fn_)) = self.points.rates() {
            rep.accuracy = Some(a);
            rep.fp_rate = Some(fp);
            rep.fn_rate = Some(fn_);
        }
        if let Ok((a, iou)) = self.pixels.scores() {
            rep.pixel_accuracy = Some(a);
            rep.lane_iou = Some(iou);
        }
        rep
    }
}

/// Scores one image. `mask` is the predicted lane mask, if any.
pub fn score_image(lanes: &[Lane], mask: Option<&[bool]>, sample: &LaneSample, cfg: &EvalConfig) -> Result<EvalCounts> {
    let (h, w) = (sample.height(), sample.width());
    let pts = gt_points(sample);
    let gt: Vec<LanePolyline> = pts.iter().map(|p| fit_spline(p)).collect::<Result<_>>()?;
    let pred: Vec<LanePolyline> = lanes.iter().map(|l| l.points.clone()).collect();
    let gt_mask: Vec<bool> = sample.labels.iter().map(|&l| l != 0).collect();
    let pixels = match mask {
        Some(m) => PixelCounts::from_masks(m, &gt_mask)?,
        None => PixelCounts::default(),
    };
    Ok(EvalCounts {
        lanes: culane_counts(&pred, &gt, cfg.line_width_px, cfg.iou_thresh, h, w),
        points: tusimple_counts(&pred, &pts, cfg.tusimple_tol_px),
        pixels,
    })
}

/// Predicts, post-processes and scores every sample.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[LaneSample],
    post: &PostprocessConfig,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(model, &images, cfg.batch_size)?;
    let counts = preds
        .par_iter()
        .zip(samples)
        .map(|(p, s)| score_image(&p.lanes(post)?, Some(&p.lane_mask()), s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut total = EvalCounts::default();
    for c in counts {
        total.add(c);
    }
    Ok(total.report())
}
