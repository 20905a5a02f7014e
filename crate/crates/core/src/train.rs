//! SGD training with optional self attention distillation, the deep
//! supervision variant, NDJSON logging and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, splitmix64, AugmentConfig, LaneSample};
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalConfig};
use crate::losses::{total_loss, validate_paths, DistillOptions, DistillTerm, LossInputs, LossWeights, Path as DistillPath};
use crate::model::{Model, ModelConfig, RunningStats, NUM_BLOCKS};
use crate::postprocess::PostprocessConfig;
use crate::tensor::{load_sadt, save_sadt, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Baseline,
    Sad,
    DeepSupervision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// One episode is one optimizer step.
    pub total_episodes: usize,
    pub seed: u64,
    /// 0 is plain SGD.
    pub momentum: f64,
    pub mode: Mode,
    pub augment: AugmentConfig,
    /// Validate every this many episodes (and after the last one); 0 never.
    pub val_every: usize,
    /// Keep a checkpoint every this many episodes; 0 never.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            total_episodes: 2000,
            seed: 0,
            momentum: 0.0,
            mode: Mode::Baseline,
            augment: AugmentConfig::default(),
            val_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.total_episodes == 0 {
            return Err(Error::invalid("batch_size and total_episodes must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SadConfig {
    pub paths: Vec<DistillPath>,
    /// First episode whose loss includes the distillation term.
    pub activation_episode: usize,
    pub detach_target: bool,
    pub allow_backward_paths: bool,
}

impl Default for SadConfig {
    fn default() -> Self {
        SadConfig {
            paths: vec![(2, 3), (3, 4)],
            activation_episode: 1000,
            detach_target: true,
            allow_backward_paths: false,
        }
    }
}

impl SadConfig {
    pub fn validate(&self, total_episodes: usize) -> Result<()> {
        validate_paths(&self.paths, NUM_BLOCKS, self.allow_backward_paths)?;
        if self.activation_episode > total_episodes {
            return Err(Error::invalid(format!(
                "activation_episode {} exceeds total_episodes {total_episodes}",
                self.activation_episode
            )));
        }
        Ok(())
    }

    fn options(&self) -> DistillOptions {
        DistillOptions {
            detach_target: self.detach_target,
            allow_backward: self.allow_backward_paths,
        }
    }
}

/// Everything a training run reads besides data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub sad: SadConfig,
    pub loss: LossWeights,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl TrainSetup {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.postprocess.validate()?;
        if self.train.mode == Mode::Sad {
            self.sad.validate(self.train.total_episodes)?;
        }
        if self.train.mode != Mode::DeepSupervision && !model.deep_supervision_blocks.is_empty() {
            return Err(Error::invalid("deep supervision heads are configured but mode is not deep_supervision"));
        }
        Ok(())
    }

    /// Whether episode `e` includes the distillation term.
    pub fn distill_active(&self, e: usize) -> bool {
        self.train.mode == Mode::Sad && e >= self.sad.activation_episode
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub total: f64,
    #[serde(rename = "L_seg")]
    pub seg: f64,
    #[serde(rename = "L_IoU")]
    pub iou: f64,
    #[serde(rename = "L_exist")]
    pub exist: Option<f64>,
    #[serde(rename = "L_distill")]
    pub distill: Option<f64>,
    #[serde(rename = "L_deep", default, skip_serializing_if = "Vec::is_empty")]
    pub deep: Vec<f64>,
    pub val_f1: Option<f64>,
}

impl EpisodeRecord {
    /// Weighted sum of the logged components.
    pub fn recomposed_total(&self, w: &LossWeights) -> f64 {
        let mut t = self.seg + w.alpha * self.iou;
        if let Some(e) = self.exist {
            t += w.beta * e;
        }
        if let Some(d) = self.distill {
            t += w.gamma * d;
        }
        t + self.deep.iter().sum::<f64>()
    }
}

/// Model, optimizer state and position in the run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    /// Momentum buffers; empty for plain SGD.
    pub velocity: Vec<Tensor<T>>,
    /// Number of episodes already run.
    pub episode: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        TrainState {
            model,
            velocity: Vec::new(),
            episode: 0,
        }
    }
}

/// Dataset position of every batch slot: one shuffled pass per epoch, the
/// shuffle a function of `(seed, epoch)` only.
pub fn batch_indices(seed: u64, episode: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for slot in episode * batch_size..(episode + 1) * batch_size {
        let (epoch, pos) = (slot / n, slot % n);
        if epoch != perm_epoch {
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch as u64)));
            perm.shuffle(&mut rng);
            perm_epoch = epoch;
        }
        out.push(perm[pos]);
    }
    out
}

/// Images, flattened labels and existence bits for one batch.
type Batch<T> = (Tensor<T>, Arc<Vec<u8>>, Vec<T>);

fn assemble<T: Scalar>(
    data: &[LaneSample],
    setup: &TrainSetup,
    episode: usize,
) -> Result<Batch<T>> {
    let cfg = &setup.train;
    let idx = batch_indices(cfg.seed, episode, cfg.batch_size, data.len());
    let samples: Vec<LaneSample> = idx
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let mix = splitmix64(cfg.seed ^ splitmix64((episode * cfg.batch_size + k) as u64 ^ 0xA5A5));
            let mut rng = ChaCha8Rng::seed_from_u64(mix);
            augment(&data[i], &cfg.augment, &mut rng)
        })
        .collect();
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack(&images)?.cast::<T>();
    let labels: Vec<u8> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let bits: Vec<T> = samples.iter().flat_map(|s| s.exist.iter().map(|&b| T::of(b as f64))).collect();
    Ok((x, Arc::new(labels), bits))
}

/// Runs one episode on `state` and returns its loss record.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, data: &[LaneSample], setup: &TrainSetup) -> Result<EpisodeRecord> {
    let e = state.episode;
    let (x, labels, bits) = assemble::<T>(data, setup, e)?;
    let model = &state.model;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &vars, xv, true)?;
    let deep: &[_] = if setup.train.mode == Mode::DeepSupervision {
        &out.deep_logits
    } else {
        &[]
    };
    let inputs = LossInputs {
        logits: out.seg_logits,
        labels,
        exist_probs: out.exist_probs,
        exist_bits: &bits,
        activations: &out.activations,
        deep_logits: deep,
    };
    let distill = setup.distill_active(e).then(|| DistillTerm {
        paths: &setup.sad.paths,
        opts: setup.sad.options(),
    });
    let loss = total_loss(&mut tape, &inputs, &setup.loss, distill)?;
    let val = |v| tape.value(v).item().f64();
    let record = EpisodeRecord {
        episode: e,
        total: val(loss.total),
        seg: val(loss.seg),
        iou: val(loss.iou),
        exist: loss.exist.map(val),
        distill: loss.distill.map(val),
        deep: loss.deep.iter().map(|&d| val(d)).collect(),
        val_f1: None,
    };
    if !record.total.is_finite() {
        return Err(Error::Diverged {
            episode: e,
            value: record.total,
        });
    }
    tape.backward(loss.total)?;

    let lr = T::of(setup.train.learning_rate);
    let mu = setup.train.momentum;
    if mu > 0.0 && state.velocity.is_empty() {
        state.velocity = state.model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    let grads: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);
    let mu = T::of(mu);
    let velocity = &mut state.velocity;
    for (i, (p, g)) in state.model.params_mut().iter_mut().zip(&grads).enumerate() {
        if velocity.is_empty() {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        } else {
            let v = velocity[i].data_mut();
            for ((w, &d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *m = mu * *m + d;
                *w -= lr * *m;
            }
        }
    }
    state.model.update_running_stats(&out.batch_stats);
    state.episode += 1;
    Ok(record)
}

/// Where and how a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Directory for `metrics.ndjson` and checkpoints; nothing is written
    /// when `None`.
    pub dir: Option<PathBuf>,
    /// Append to an existing log (resumed runs).
    pub append_log: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<EpisodeRecord>,
    /// `(episode, f1)` of the best validation score seen.
    pub best: Option<(usize, f64)>,
}

/// Trains from `state.episode` until `until` episodes have run in total.
/// Validation happens after every `val_every`-th episode and after the last
/// one; the best-scoring model is saved under `best/`, the final one under
/// `final/`.
pub fn train_until<T: Scalar>(
    mut state: TrainState<T>,
    data: &[LaneSample],
    val: &[LaneSample],
    setup: &TrainSetup,
    until: usize,
    out: &RunOutput,
    mut progress: impl FnMut(&EpisodeRecord),
) -> Result<TrainOutcome<T>> {
    setup.validate(state.model.config())?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in data {
        s.check()?;
    }
    let mut log_file = match &out.dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("metrics.ndjson");
            let f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(out.append_log)
                .truncate(!out.append_log)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((p, BufWriter::new(f)))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let seed = setup.train.seed;
    while state.episode < until {
        let mut rec = train_step(&mut state, data, setup)?;
        let done = state.episode;
        let cadence = setup.train.val_every > 0 && done.is_multiple_of(setup.train.val_every);
        if !val.is_empty() && (cadence || done == until) {
            let f1 = evaluate(&state.model, val, &setup.postprocess, &setup.eval)?.f1.unwrap_or(0.0);
            rec.val_f1 = Some(f1);
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some((done, f1));
                if let Some(d) = &out.dir {
                    save_checkpoint(&d.join("best"), &state, seed)?;
                }
            }
        }
        if let (Some(d), true) = (&out.dir, setup.train.checkpoint_every > 0) {
            if done.is_multiple_of(setup.train.checkpoint_every) {
                save_checkpoint(&d.join(format!("ckpt-{done:06}")), &state, seed)?;
            }
        }
        if let Some((p, w)) = &mut log_file {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&*p, e))?;
        }
        progress(&rec);
        log.push(rec);
    }
    if let Some(d) = &out.dir {
        save_checkpoint(&d.join("final"), &state, seed)?;
    }
    Ok(TrainOutcome { state, log, best })
}

/// Trains a fresh state to `setup.train.total_episodes`.
pub fn train<T: Scalar>(
    model: Model<T>,
    data: &[LaneSample],
    val: &[LaneSample],
    setup: &TrainSetup,
    out: &RunOutput,
) -> Result<TrainOutcome<T>> {
    train_until(TrainState::new(model), data, val, setup, setup.train.total_episodes, out, |_| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub episode: usize,
    pub seed: u64,
    pub has_velocity: bool,
}

/// Writes `manifest.json` and `params.sadt` (parameters, then running
/// mean and variance per norm layer, then momentum buffers) into `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, state: &TrainState<T>, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        model: state.model.config().clone(),
        episode: state.episode,
        seed,
        has_velocity: !state.velocity.is_empty(),
    };
    let mp = dir.join("manifest.json");
    let f = File::create(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
    let stats: Vec<Tensor<T>> = state
        .model
        .running_stats()
        .iter()
        .flat_map(|r| {
            [
                Tensor::new(vec![r.mean.len()], r.mean.clone()).expect("1-d"),
                Tensor::new(vec![r.var.len()], r.var.clone()).expect("1-d"),
            ]
        })
        .collect();
    let all: Vec<&Tensor<T>> = state.model.params().iter().chain(&stats).chain(&state.velocity).collect();
    save_sadt(&dir.join("params.sadt"), &all)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(CheckpointManifest, TrainState<T>)> {
    let mp = dir.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let pp = dir.join("params.sadt");
    let mut tensors = load_sadt(&pp)?.into_iter().map(|t| t.cast::<T>());
    let template = Model::<T>::build(manifest.model.clone(), 0)?;
    let np = template.params().len();
    let nn = template.running_stats().len();
    let expect = np + 2 * nn + if manifest.has_velocity { np } else { 0 };
    let total = tensors.len();
    if total != expect {
        return Err(Error::format(&pp, format!("expected {expect} tensors, found {total}")));
    }
    let params: Vec<Tensor<T>> = tensors.by_ref().take(np).collect();
    let mut running = Vec::with_capacity(nn);
    for _ in 0..nn {
        let mean = tensors.next().expect("counted").into_data();
        let var = tensors.next().expect("counted").into_data();
        running.push(RunningStats { mean, var });
    }
    let velocity: Vec<Tensor<T>> = tensors.collect();
    let model = Model::from_parts(manifest.model.clone(), params, running)?;
    let state = TrainState {
        model,
        velocity,
        episode: manifest.episode,
    };
    Ok((manifest, state))
}
