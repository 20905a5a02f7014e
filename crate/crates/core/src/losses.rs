//! Segmentation, IoU, existence and attention-distillation losses, and the
//! weighted total objective.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{atgen, spatial_size};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub background_ce_weight: f64,
    pub iou_form: IouForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            background_ce_weight: 0.4,
            iou_form: IouForm::Literal,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("background_ce_weight", self.background_ce_weight),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which ratio the IoU loss subtracts from one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouForm {
    /// `1 - N_p / (N_p + N_g - N_o)`.
    #[default]
    Literal,
    /// `1 - N_o / (N_p + N_g - N_o)`.
    Jaccard,
}

/// IoU loss from (possibly soft) counts. Zero when the union is empty.
pub fn iou_from_counts(np: f64, ng: f64, no: f64, form: IouForm) -> f64 {
    let union = np + ng - no;
    if union == 0.0 {
        return 0.0;
    }
    match form {
        IouForm::Literal => 1.0 - np / union,
        IouForm::Jaccard => 1.0 - no / union,
    }
}

/// Distillation path `(i, j)`: block `i` mimics block `j` (1-based).
pub type Path = (usize, usize);

/// Number of distinct forward paths in a network of depth `m`.
pub fn forward_path_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// `(1,2), (2,3), ..., (m-1, m)`.
pub fn adjacent_paths(m: usize) -> Vec<Path> {
    (1..m).map(|i| (i, i + 1)).collect()
}

/// Checks a path set for depth `m`; returns the number of possible forward
/// paths on success.
pub fn validate_paths(paths: &[Path], m: usize, allow_backward: bool) -> Result<usize> {
    if m < 2 {
        return Err(Error::InvalidPaths(format!("depth {m} admits no paths")));
    }
    let bound = forward_path_count(m);
    if paths.len() > bound {
        return Err(Error::InvalidPaths(format!(
            "{} paths exceed the bound of {bound} for {m} blocks",
            paths.len()
        )));
    }
    let mut seen = HashSet::new();
    for &(i, j) in paths {
        if i == 0 || j == 0 || i > m || j > m {
            return Err(Error::InvalidPaths(format!(
                "path ({i},{j}) outside blocks 1..={m}"
            )));
        }
        if i == j {
            return Err(Error::InvalidPaths(format!("path ({i},{j}) links a block to itself")));
        }
        if i > j && !allow_backward {
            return Err(Error::InvalidPaths(format!(
                "backward path ({i},{j}) requires allow_backward_paths"
            )));
        }
        if !seen.insert((i, j)) {
            return Err(Error::InvalidPaths(format!("duplicate path ({i},{j})")));
        }
    }
    Ok(bound)
}

/// Class weight vector: `bg_weight` for class 0, one elsewhere.
pub fn class_weights<T: Scalar>(num_classes: usize, bg_weight: f64) -> Vec<T> {
    (0..num_classes)
        .map(|c| if c == 0 { T::of(bg_weight) } else { T::one() })
        .collect()
}

/// Weighted cross-entropy over class scores `[N_c,H,W]` / `[N,N_c,H,W]`.
pub fn seg_ce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: Arc<Vec<u8>>,
    bg_weight: f64,
) -> Result<Var> {
    let nc = class_axis(tape, logits)?;
    tape.weighted_cross_entropy(logits, labels, &class_weights(nc, bg_weight))
}

fn class_axis<T: Scalar>(tape: &Tape<T>, logits: Var) -> Result<usize> {
    match *tape.shape(logits) {
        [c, _, _] | [_, c, _, _] => Ok(c),
        ref s => Err(Error::shape(format!("class scores must be rank 3 or 4, got {s:?}"))),
    }
}

/// Binary lane indicator (`label > 0`) as a tensor shaped like `q`.
pub fn lane_indicator<T: Scalar>(labels: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::new(
        shape.to_vec(),
        labels
            .iter()
            .map(|&l| if l > 0 { T::one() } else { T::zero() })
            .collect(),
    )
}

/// IoU loss on a lane-probability map `q` against a 0/1 indicator `y` with
/// the same shape, using probability mass as counts.
pub fn soft_iou<T: Scalar>(tape: &mut Tape<T>, q: Var, y: &Tensor<T>, form: IouForm) -> Result<Var> {
    if tape.shape(q) != y.shape() {
        return Err(Error::shape(format!(
            "lane map {:?} vs indicator {:?}",
            tape.shape(q),
            y.shape()
        )));
    }
    let ng: T = y.data().iter().copied().sum();
    let yv = tape.constant(y.clone());
    let np = tape.sum_all(q);
    let qy = tape.mul(q, yv)?;
    let no = tape.sum_all(qy);
    let union_val = tape.value(np).item() + ng - tape.value(no).item();
    if union_val == T::zero() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    // union = N_p + N_g - N_o
    let np_minus_no = tape.sub(np, no)?;
    let union = tape.affine(np_minus_no, 1.0, ng.f64());
    let numer = match form {
        IouForm::Literal => np,
        IouForm::Jaccard => no,
    };
    let ratio = tape.div(numer, union)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// Per-pixel lane probability `1 - softmax(scores)_background`.
pub fn lane_probability<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let probs = tape.channel_softmax(logits)?;
    let bg = tape.select_channel(probs, 0)?;
    Ok(tape.affine(bg, -1.0, 1.0))
}

pub fn iou_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8], form: IouForm) -> Result<Var> {
    let q = lane_probability(tape, logits)?;
    let y = lane_indicator(labels, tape.shape(q))?;
    soft_iou(tape, q, &y, form)
}

/// Mean binary cross-entropy over lane slots.
pub fn exist_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, bits: &[T]) -> Result<Var> {
    tape.binary_cross_entropy(probs, bits)
}

/// Distillation options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillOptions {
    pub detach_target: bool,
    pub allow_backward: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions {
            detach_target: true,
            allow_backward: false,
        }
    }
}

/// Sum over paths `(i, j)` of the mean squared difference between the
/// attention map of `A_i`, resized to `A_j`'s size, and that of `A_j`.
pub fn distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    activations: &[Var],
    paths: &[Path],
    opts: DistillOptions,
) -> Result<Var> {
    validate_paths(paths, activations.len(), opts.allow_backward)?;
    let mut targets: HashMap<usize, Var> = HashMap::new();
    let mut total: Option<Var> = None;
    for &(i, j) in paths {
        let (th, tw) = spatial_size(tape, activations[j - 1])?;
        let target = match targets.get(&j) {
            Some(&t) => t,
            None => {
                let src = if opts.detach_target {
                    tape.detach(activations[j - 1])
                } else {
                    activations[j - 1]
                };
                let t = atgen(tape, src, th, tw)?;
                targets.insert(j, t);
                t
            }
        };
        let mimic = atgen(tape, activations[i - 1], th, tw)?;
        let diff = tape.sub(mimic, target)?;
        let sq = tape.pow_abs(diff, 2.0);
        let term = tape.mean_all(sq);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Everything the objective needs from one forward pass.
pub struct LossInputs<'a, T> {
    pub logits: Var,
    pub labels: Arc<Vec<u8>>,
    pub exist_probs: Option<Var>,
    pub exist_bits: &'a [T],
    pub activations: &'a [Var],
    pub deep_logits: &'a [Var],
}

/// The distillation term's configuration when it is active.
pub struct DistillTerm<'a> {
    pub paths: &'a [Path],
    pub opts: DistillOptions,
}

/// Nodes of each component and of the weighted total.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub seg: Var,
    pub iou: Var,
    pub exist: Option<Var>,
    pub distill: Option<Var>,
    pub deep: Vec<Var>,
}

/// `L_seg + alpha L_IoU + beta L_exist + gamma L_distill`, plus one unit
/// weighted cross-entropy per deep-supervision head. The distillation term
/// is left out entirely when `distill` is `None` or `gamma` is zero.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &LossInputs<'_, T>,
    weights: &LossWeights,
    distill: Option<DistillTerm<'_>>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let seg = seg_ce_loss(tape, inputs.logits, inputs.labels.clone(), weights.background_ce_weight)?;
    let iou = iou_loss(tape, inputs.logits, &inputs.labels, weights.iou_form)?;
    let mut total = {
        let w = tape.affine(iou, weights.alpha, 0.0);
        tape.add(seg, w)?
    };
    let exist = match inputs.exist_probs {
        Some(p) => {
            let e = exist_loss(tape, p, inputs.exist_bits)?;
            let w = tape.affine(e, weights.beta, 0.0);
            total = tape.add(total, w)?;
            Some(e)
        }
        None => None,
    };
    let distill = match distill {
        Some(d) if weights.gamma != 0.0 => {
            let l = distill_loss(tape, inputs.activations, d.paths, d.opts)?;
            let w = tape.affine(l, weights.gamma, 0.0);
            total = tape.add(total, w)?;
            Some(l)
        }
        _ => None,
    };
    let mut deep = Vec::with_capacity(inputs.deep_logits.len());
    for &h in inputs.deep_logits {
        let l = seg_ce_loss(tape, h, inputs.labels.clone(), weights.background_ce_weight)?;
        total = tape.add(total, l)?;
        deep.push(l);
    }
    Ok(LossBreakdown {
        total,
        seg,
        iou,
        exist,
        distill,
        deep,
    })
}
