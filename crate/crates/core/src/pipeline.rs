//! File-level operations behind the command line: dataset generation,
//! training runs, inference, evaluation, attention export and the path
//! ablation.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::atgen;
use crate::autodiff::Tape;
use crate::config::{DataConfig, RunConfig};
use crate::data::pgm::{read_pgm, to_gray8, write_pgm};
use crate::data::{generate_dataset, read_dataset, splitmix64, write_dataset, DatasetIndex, IndexEntry, LaneSample};
use crate::error::{Error, Result};
use crate::inference::{oracle_prediction, predict, score_image, EvalConfig, EvalCounts, Prediction};
use crate::losses::Path as DistillPath;
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::postprocess::{Lane, PostprocessConfig};
use crate::spline::LanePolyline;
use crate::tensor::{load_sadt, save_sadt, Tensor};
use crate::train::{load_checkpoint, train_until, EpisodeRecord, Mode, RunOutput, TrainOutcome, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

fn split_seed(cfg: &DataConfig, split: Split) -> u64 {
    match split {
        Split::Train => cfg.seed,
        Split::Val => splitmix64(cfg.seed ^ 0x0056_414C),
    }
}

/// Synthesizes one split in memory.
pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<(DatasetIndex, Vec<LaneSample>)> {
    let n = match split {
        Split::Train => cfg.train_count,
        Split::Val => cfg.val_count,
    };
    let seed = split_seed(cfg, split);
    let items = generate_dataset(n, seed, &cfg.synth)?;
    let index = DatasetIndex {
        height: cfg.synth.height,
        width: cfg.synth.width,
        lane_slots: cfg.synth.slots,
        seed,
        samples: items
            .iter()
            .enumerate()
            .map(|(i, (s, _))| IndexEntry {
                id: format!("{i:05}"),
                seed: *s,
            })
            .collect(),
    };
    Ok((index, items.into_iter().map(|(_, s)| s).collect()))
}

/// Writes `out/train` and `out/val`; returns their sizes.
pub fn gen_data(cfg: &DataConfig, out: &Path) -> Result<(usize, usize)> {
    let mut sizes = [0; 2];
    for (k, split) in [Split::Train, Split::Val].into_iter().enumerate() {
        let (index, samples) = generate_split(cfg, split)?;
        write_dataset(&out.join(split.name()), &index, &samples)?;
        sizes[k] = samples.len();
    }
    Ok((sizes[0], sizes[1]))
}

/// A split from its configured directory, or synthesized when none is set.
pub fn load_split(cfg: &DataConfig, split: Split) -> Result<Vec<LaneSample>> {
    let dir = match split {
        Split::Train => &cfg.train_dir,
        Split::Val => &cfg.val_dir,
    };
    match dir {
        Some(d) => Ok(read_dataset(d)?.1),
        None => Ok(generate_split(cfg, split)?.1),
    }
}

/// Trains as configured, writing logs and checkpoints under `out`. With
/// `resume`, training continues from that checkpoint and appends to the log.
pub fn run_training(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    progress: impl FnMut(&EpisodeRecord),
) -> Result<TrainOutcome<f32>> {
    let train = load_split(&cfg.data, Split::Train)?;
    let val = load_split(&cfg.data, Split::Val)?;
    let state = match resume {
        Some(dir) => {
            let (manifest, state) = load_checkpoint::<f32>(dir)?;
            if manifest.model != cfg.model {
                return Err(Error::invalid(format!(
                    "checkpoint {} was trained with a different model config",
                    dir.display()
                )));
            }
            state
        }
        None => TrainState::new(Model::build(cfg.model.clone(), cfg.train.seed)?),
    };
    let run_out = RunOutput {
        dir: Some(out.to_path_buf()),
        append_log: resume.is_some(),
    };
    train_until(state, &train, &val, &cfg.setup(), cfg.train.total_episodes, &run_out, progress)
}

/// Where predictions come from.
#[derive(Clone, Debug)]
pub enum Source {
    Checkpoint(PathBuf),
    /// The labels themselves (one-hot maps, true existence bits).
    Oracle,
}

/// Writes `probs/<id>.sadt` (class probabilities, then existence scores)
/// and `lanes/<id>.json` for every sample of the dataset at `data_dir`.
pub fn infer(source: &Source, data_dir: &Path, out: &Path, post: &PostprocessConfig, batch_size: usize) -> Result<usize> {
    post.validate()?;
    let (index, samples) = read_dataset(data_dir)?;
    let preds: Vec<Prediction> = match source {
        Source::Oracle => samples.iter().map(oracle_prediction).collect(),
        Source::Checkpoint(dir) => {
            let (_, state) = load_checkpoint::<f32>(dir)?;
            let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
            predict(&state.model, &images, batch_size)?
        }
    };
    for sub in ["probs", "lanes"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    index.samples.par_iter().zip(&preds).try_for_each(|(e, p)| -> Result<()> {
        let exist = Tensor::new(vec![p.exist.len()], p.exist.clone())?;
        save_sadt(&out.join("probs").join(format!("{}.sadt", e.id)), &[&p.probs, &exist])?;
        let lanes: Vec<LanePolyline> = p.lanes(post)?.into_iter().map(|l| l.points).collect();
        let lp = out.join("lanes").join(format!("{}.json", e.id));
        fs::write(&lp, serde_json::to_vec(&lanes)?).map_err(|err| Error::io(&lp, err))
    })?;
    Ok(samples.len())
}

fn read_lanes(path: &Path) -> Result<Vec<Lane>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let polys: Vec<LanePolyline> = serde_json::from_slice(&bytes)?;
    Ok(polys
        .into_iter()
        .enumerate()
        .map(|(i, points)| Lane { slot: i + 1, points })
        .collect())
}

/// Predicted lane mask of one sample from `masks/<id>.pgm` (nonzero is
/// lane) or else from `probs/<id>.sadt`; `None` when neither exists.
fn read_mask(pred_dir: &Path, id: &str, sample: &LaneSample) -> Result<Option<Vec<bool>>> {
    let mp = pred_dir.join("masks").join(format!("{id}.pgm"));
    if mp.exists() {
        let (w, h, px) = read_pgm(&mp)?;
        if (h, w) != (sample.height(), sample.width()) {
            return Err(Error::format(&mp, format!("mask is {w}x{h}")));
        }
        return Ok(Some(px.iter().map(|&v| v != 0).collect()));
    }
    let pp = pred_dir.join("probs").join(format!("{id}.sadt"));
    if pp.exists() {
        let mut ts = load_sadt(&pp)?.into_iter();
        let probs = ts.next().ok_or_else(|| Error::format(&pp, "no tensor"))?;
        let p = Prediction {
            probs: probs.cast(),
            exist: Vec::new(),
        };
        return Ok(Some(p.lane_mask()));
    }
    Ok(None)
}

/// Scores the predictions under `pred_dir` against the dataset at
/// `data_dir`.
pub fn eval_dir(pred_dir: &Path, data_dir: &Path, cfg: &EvalConfig) -> Result<MetricReport> {
    let (index, samples) = read_dataset(data_dir)?;
    let counts = index
        .samples
        .par_iter()
        .zip(&samples)
        .map(|(e, s)| {
            let lanes = read_lanes(&pred_dir.join("lanes").join(format!("{}.json", e.id)))?;
            let mask = read_mask(pred_dir, &e.id, s)?;
            score_image(&lanes, mask.as_deref(), s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = EvalCounts::default();
    for c in counts {
        total.add(c);
    }
    Ok(total.report())
}

/// Writes the attention maps of `A_1..A_4`, resized to the input size, as
/// `<out>/<checkpoint name>/<id>_A<m>.pgm` for the first `count` samples.
pub fn export_attention(checkpoints: &[PathBuf], data_dir: &Path, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (index, samples) = read_dataset(data_dir)?;
    let n = count.min(samples.len());
    let mut written = Vec::new();
    for ck in checkpoints {
        let (_, state) = load_checkpoint::<f32>(ck)?;
        let model = &state.model;
        let tag = ck
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let dir = out.join(&tag);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (h, w) = (model.config().input_h, model.config().input_w);
        for (e, s) in index.samples.iter().zip(&samples).take(n) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let x = tape.constant(s.image.clone());
            let fwd = model.forward(&mut tape, &vars, x, false)?;
            for (m, &a) in fwd.activations.iter().enumerate() {
                let psi = atgen(&mut tape, a, h, w)?;
                let vals: Vec<f64> = tape.value(psi).data().iter().map(|&v| v as f64).collect();
                let p = dir.join(format!("{}_A{}.pgm", e.id, m + 1));
                write_pgm(&p, w, h, &to_gray8(&vals))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// One row of the path ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub paths: Vec<DistillPath>,
    pub best_f1: Option<f64>,
    pub final_f1: Option<f64>,
    pub final_loss: f64,
}

/// `P23, P34` style name of a path set.
pub fn path_label(paths: &[DistillPath]) -> String {
    paths.iter().map(|(i, j)| format!("P{i}{j}")).collect::<Vec<_>>().join(", ")
}

pub fn default_path_sets() -> Vec<Vec<DistillPath>> {
    vec![vec![(2, 3), (3, 4)], vec![(2, 4), (3, 4)], vec![(1, 2)]]
}

/// Trains one distillation run per path set (each from the same initial
/// model) under `out/<n>`, then writes `ablation.json` and `ablation.md`.
pub fn ablate_paths(
    cfg: &RunConfig,
    sets: &[Vec<DistillPath>],
    out: &Path,
    mut progress: impl FnMut(&str, &EpisodeRecord),
) -> Result<Vec<AblationRow>> {
    if sets.is_empty() {
        return Err(Error::invalid("no path sets to compare"));
    }
    let mut base = cfg.clone();
    base.train.mode = Mode::Sad;
    for s in sets {
        let mut c = base.clone();
        c.sad.paths = s.clone();
        c.validate()?;
    }
    let train = load_split(&cfg.data, Split::Train)?;
    let val = load_split(&cfg.data, Split::Val)?;
    let mut rows = Vec::new();
    for (k, s) in sets.iter().enumerate() {
        let mut c = base.clone();
        c.sad.paths = s.clone();
        let label = path_label(s);
        let run_out = RunOutput {
            dir: Some(out.join(format!("set{}", k + 1))),
            append_log: false,
        };
        let model = Model::<f32>::build(c.model.clone(), c.train.seed)?;
        let res = train_until(
            TrainState::new(model),
            &train,
            &val,
            &c.setup(),
            c.train.total_episodes,
            &run_out,
            |r| progress(&label, r),
        )?;
        rows.push(AblationRow {
            label,
            paths: s.clone(),
            best_f1: res.best.map(|b| b.1),
            final_f1: res.log.iter().rev().find_map(|r| r.val_f1),
            final_loss: res.log.last().map_or(f64::NAN, |r| r.total),
        });
    }
    let jp = out.join("ablation.json");
    fs::write(&jp, serde_json::to_vec_pretty(&rows)?).map_err(|e| Error::io(&jp, e))?;
    let mp = out.join("ablation.md");
    fs::write(&mp, render_table(&rows)).map_err(|e| Error::io(&mp, e))?;
    Ok(rows)
}

/// Markdown table with one row per path set.
pub fn render_table(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", 100.0 * x));
    let mut s = String::from("| Paths | Best val F1 | Final val F1 | Final loss |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} |\n",
            r.label,
            f(r.best_f1),
            f(r.final_f1),
            r.final_loss
        ));
    }
    s
}
