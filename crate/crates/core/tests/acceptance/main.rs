//! Acceptance suite. `acceptance_criteria` prints one PASS/FAIL line per
//! criterion; the desk-scale distillation comparison is `#[ignore]`d
//! because it trains for hours on one core:
//!
//! ```text
//! cargo test -p sadkit --test acceptance -- --ignored --nocapture
//! ```

#[path = "../common/mod.rs"]
mod common;
mod gradients;
mod oracles;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use common::{tiny_data, tiny_model, tiny_synth};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadkit::attention::{atgen, g_max_p, g_sum_p};
use sadkit::autodiff::Tape;
use sadkit::config::{DataConfig, RunConfig};
use sadkit::data::AugmentConfig;
use sadkit::inference::{evaluate, EvalConfig};
use sadkit::losses::{self, validate_paths, DistillOptions, DistillTerm, IouForm, LossInputs, LossWeights};
use sadkit::model::{Model, ModelConfig};
use sadkit::pipeline::{self, Source};
use sadkit::postprocess::{extract_points, sampled_rows, PostprocessConfig};
use sadkit::tensor::Tensor;
use sadkit::train::{train, train_until, Mode, RunOutput, SadConfig, TrainConfig, TrainSetup, TrainState};
use sadkit::Error;

/// Written past the test harness's capture so the lines always show.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn run(n: usize, what: &str, f: impl FnOnce()) -> bool {
    let t = std::time::Instant::now();
    let ok = catch_unwind(AssertUnwindSafe(f)).is_ok();
    let verdict = if ok { "PASS" } else { "FAIL" };
    report(&format!("criterion {n}: {verdict}  {what}  ({:.1}s)", t.elapsed().as_secs_f64()));
    ok
}

#[test]
fn acceptance_criteria() {
    let results = [
        run(1, "gradient suite", gradients::all),
        run(2, "attention invariants", attention_invariants),
        run(3, "oracle equivalences", oracles::all),
        run(4, "formula fidelity", formula_fidelity),
        run(5, "distillation neutrality", distillation_neutrality),
        run(7, "ablation scaffolding", ablation_scaffolding),
        run(8, "post-processing rows and oracle pipeline", postprocessing),
    ];
    report("criterion 6: not run here (ignored test `criterion_6_desk_scale_benefit`)");
    assert!(results.iter().all(|&ok| ok), "acceptance criteria failed");
}

fn attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..10), rng.gen_range(1..10));
        let n = rng.gen_range(1..3);
        let shape = vec![n, c, h, w];
        let scale = rng.gen_range(0.1..5.0);
        let a = Tensor::from_fn(&shape, |_| scale * rng.gen_range(-1.0..1.0));
        let (th, tw) = (rng.gen_range(1..12), rng.gen_range(1..12));

        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let plane = h * w;
        let permuted = Tensor::from_fn(&shape, |i| {
            let (b, ch, p) = (i / (c * plane), i / plane % c, i % plane);
            a.data()[(b * c + perm[ch]) * plane + p]
        });

        let mut tape = Tape::new();
        let av = tape.constant(a);
        let pv = tape.constant(permuted);
        let psi = atgen(&mut tape, av, th, tw).unwrap();
        let psi_p = atgen(&mut tape, pv, th, tw).unwrap();
        let m = tape.value(psi).data();
        for plane in m.chunks(th * tw) {
            assert!(plane.iter().all(|&v| v >= 0.0));
            assert!((plane.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (x, y) in m.iter().zip(tape.value(psi_p).data()) {
            assert!((x - y).abs() <= 1e-12 * x.max(*y));
        }

        let p = rng.gen_range(1.01..4.0);
        let gs = g_sum_p(&mut tape, av, p).unwrap();
        let gm = g_max_p(&mut tape, av, p).unwrap();
        for (mx, sm) in tape.value(gm).data().iter().zip(tape.value(gs).data()) {
            assert!(mx <= sm);
        }
    }
}

/// Independent loss oracles for the formula-fidelity check.
mod reference {
    /// Pixel-center alignment, clamped to the source.
    fn source(i: usize, len: usize, out: usize) -> f64 {
        ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64)
    }

    pub fn log_softmax_at(logits: &[f64], c: usize, hw: usize, b: usize, p: usize, k: usize) -> f64 {
        let at = |ch: usize| logits[(b * c + ch) * hw + p];
        let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|ch| (at(ch) - m).exp()).sum::<f64>().ln();
        at(k) - lse
    }

    pub fn seg_ce(logits: &[f64], labels: &[u8], n: usize, c: usize, hw: usize, bg: f64) -> f64 {
        let mut s = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let k = labels[b * hw + p] as usize;
                let w = if k == 0 { bg } else { 1.0 };
                s -= w * log_softmax_at(logits, c, hw, b, p, k);
            }
        }
        s / (n * hw) as f64
    }

    pub fn iou(logits: &[f64], labels: &[u8], n: usize, c: usize, hw: usize) -> f64 {
        let (mut np, mut ng, mut no) = (0.0, 0.0, 0.0);
        for b in 0..n {
            for p in 0..hw {
                let q = 1.0 - log_softmax_at(logits, c, hw, b, p, 0).exp();
                let y = if labels[b * hw + p] > 0 { 1.0 } else { 0.0 };
                np += q;
                ng += y;
                no += q * y;
            }
        }
        1.0 - np / (np + ng - no)
    }

    pub fn bce(p: &[f64], y: &[f64]) -> f64 {
        let s: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        s / p.len() as f64
    }

    /// Attention maps of `[N,C,H,W]` data at `th x tw`, one plane per item.
    pub fn psi(a: &[f64], n: usize, c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * th * tw);
        for b in 0..n {
            let g: Vec<f64> = (0..h * w)
                .map(|p| (0..c).map(|ch| a[(b * c + ch) * h * w + p].powi(2)).sum())
                .collect();
            let resized: Vec<f64> = if (h, w) == (th, tw) {
                g
            } else {
                let mut r = Vec::with_capacity(th * tw);
                for y in 0..th {
                    let sy = source(y, h, th);
                    let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
                    let y1 = (y0 + 1).min(h - 1);
                    for x in 0..tw {
                        let sx = source(x, w, tw);
                        let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                        let x1 = (x0 + 1).min(w - 1);
                        let top = g[y0 * w + x0] * (1.0 - fx) + g[y0 * w + x1] * fx;
                        let bot = g[y1 * w + x0] * (1.0 - fx) + g[y1 * w + x1] * fx;
                        r.push(top * (1.0 - fy) + bot * fy);
                    }
                }
                r
            };
            let m = resized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = resized.iter().map(|v| (v - m).exp()).sum();
            out.extend(resized.iter().map(|v| (v - m).exp() / z));
        }
        out
    }
}

fn hard_iou_case(rng: &mut ChaCha8Rng, form: IouForm) {
    let (n, c, h, w) = (rng.gen_range(1..3), 3, 8, 16);
    let hw = h * w;
    let total = n * hw;
    let np: usize = rng.gen_range(0..=total);
    let ng: usize = rng.gen_range(0..=total);
    let no = rng.gen_range((np + ng).saturating_sub(total)..=np.min(ng));
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    // gt: order[..ng]; prediction: order[..no] plus order[ng..ng + np - no]
    let mut labels = vec![0u8; total];
    for &i in &order[..ng] {
        labels[i] = rng.gen_range(1..c as u8);
    }
    let mut on = vec![false; total];
    for &i in order[..no].iter().chain(&order[ng..ng + np - no]) {
        on[i] = true;
    }
    let logits = Tensor::from_fn(&[n, c, h, w], |i| {
        let (b, ch, p) = (i / (c * hw), i / hw % c, i % hw);
        let lane = on[b * hw + p];
        match (ch, lane) {
            (0, false) | (1, true) => 0.0,
            _ => -1000.0,
        }
    });
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let l = losses::iou_loss(&mut tape, x, &labels, form).unwrap();
    let (np, ng, no) = (np as f64, ng as f64, no as f64);
    let union = np + ng - no;
    let expect = match (form, union == 0.0) {
        (_, true) => 0.0,
        (IouForm::Literal, false) => 1.0 - np / union,
        (IouForm::Jaccard, false) => 1.0 - no / union,
    };
    assert_eq!(tape.value(l).item(), expect, "np {np} ng {ng} no {no}");
    assert_eq!(losses::iou_from_counts(np, ng, no, form), expect);
}

fn formula_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        hard_iou_case(&mut rng, IouForm::Literal);
    }
    for _ in 0..20 {
        hard_iou_case(&mut rng, IouForm::Jaccard);
    }

    for _ in 0..50 {
        let (n, c, h, w) = (rng.gen_range(1..3), rng.gen_range(2..5), 2 * rng.gen_range(2..5), 2 * rng.gen_range(2..5));
        let hw = h * w;
        let slots = c - 1;
        let logits: Vec<f64> = (0..n * c * hw).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..n * hw).map(|_| rng.gen_range(0..c as u8)).collect();
        let probs: Vec<f64> = (0..n * slots).map(|_| rng.gen_range(0.01..0.99)).collect();
        let bits: Vec<f64> = (0..n * slots).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let sizes = [(h, w), (h / 2, w / 2), (h / 2, w / 2), (h / 2, w / 2)];
        let acts: Vec<(usize, Vec<f64>)> = sizes
            .iter()
            .map(|&(ah, aw)| {
                let ac = rng.gen_range(1..4);
                (ac, (0..n * ac * ah * aw).map(|_| rng.gen_range(-2.0..2.0)).collect())
            })
            .collect();
        let weights = LossWeights {
            alpha: rng.gen_range(0.0..1.0),
            beta: rng.gen_range(0.0..1.0),
            gamma: rng.gen_range(0.0..1.0),
            background_ce_weight: rng.gen_range(0.1..1.0),
            ..Default::default()
        };
        let paths = [(1, 2), (2, 3), (3, 4), (1, 4)];

        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::new(vec![n, c, h, w], logits.clone()).unwrap());
        let pv = tape.constant(Tensor::new(vec![n, slots], probs.clone()).unwrap());
        let av: Vec<_> = acts
            .iter()
            .zip(&sizes)
            .map(|((ac, d), &(ah, aw))| tape.constant(Tensor::new(vec![n, *ac, ah, aw], d.clone()).unwrap()))
            .collect();
        let inputs = LossInputs {
            logits: lv,
            labels: Arc::new(labels.clone()),
            exist_probs: Some(pv),
            exist_bits: &bits,
            activations: &av,
            deep_logits: &[],
        };
        let d = DistillTerm {
            paths: &paths,
            opts: DistillOptions::default(),
        };
        let b = losses::total_loss(&mut tape, &inputs, &weights, Some(d)).unwrap();

        let seg = reference::seg_ce(&logits, &labels, n, c, hw, weights.background_ce_weight);
        let iou = reference::iou(&logits, &labels, n, c, hw);
        let exist = reference::bce(&probs, &bits);
        let mut distill = 0.0;
        for &(i, j) in &paths {
            let ((hi, wi), (hj, wj)) = (sizes[i - 1], sizes[j - 1]);
            let (ci, di) = &acts[i - 1];
            let (cj, dj) = &acts[j - 1];
            let mimic = reference::psi(di, n, *ci, hi, wi, hj, wj);
            let target = reference::psi(dj, n, *cj, hj, wj, hj, wj);
            let sq: f64 = mimic.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
            distill += sq / mimic.len() as f64;
        }
        let expect = seg + weights.alpha * iou + weights.beta * exist + weights.gamma * distill;
        let value = |v| tape.value(v).item();
        assert!((value(b.seg) - seg).abs() <= 1e-9);
        assert!((value(b.iou) - iou).abs() <= 1e-9);
        assert!((value(b.exist.unwrap()) - exist).abs() <= 1e-9);
        if weights.gamma > 0.0 {
            assert!((value(b.distill.unwrap()) - distill).abs() <= 1e-9);
        }
        assert!((value(b.total) - expect).abs() <= 1e-9, "{} vs {expect}", value(b.total));
    }
}

fn neutral_setup(mode: Mode, episodes: usize) -> TrainSetup {
    TrainSetup {
        train: TrainConfig {
            batch_size: 2,
            total_episodes: episodes,
            seed: 17,
            momentum: 0.9,
            mode,
            augment: AugmentConfig::default(),
            val_every: 0,
            ..Default::default()
        },
        sad: SadConfig {
            activation_episode: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn distillation_neutrality() {
    let data = tiny_data(8, 4);
    let go = |s: &TrainSetup| {
        let model = Model::<f32>::build(tiny_model(), 9).unwrap();
        train(model, &data, &[], s, &RunOutput::default()).unwrap()
    };
    let episodes = 5;
    let base = go(&neutral_setup(Mode::Baseline, episodes));

    let mut late = neutral_setup(Mode::Sad, episodes);
    late.sad.activation_episode = episodes;
    let mut zero = neutral_setup(Mode::Sad, episodes);
    zero.loss.gamma = 0.0;
    let on = go(&neutral_setup(Mode::Sad, episodes));
    assert_ne!(on.state.model.params(), base.state.model.params());

    for s in [late, zero] {
        let r = go(&s);
        assert_eq!(r.state.model.params(), base.state.model.params());
        assert_eq!(r.state.model.running_stats(), base.state.model.running_stats());
        assert_eq!(r.state.velocity, base.state.velocity);
        let totals = |o: &sadkit::train::TrainOutcome<f32>| o.log.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(totals(&r), totals(&base));
    }
}

fn tiny_run_config() -> RunConfig {
    RunConfig {
        model: tiny_model(),
        data: DataConfig {
            synth: tiny_synth(),
            train_count: 6,
            val_count: 3,
            ..Default::default()
        },
        train: TrainConfig {
            batch_size: 2,
            total_episodes: 3,
            val_every: 0,
            ..Default::default()
        },
        sad: SadConfig {
            activation_episode: 1,
            ..Default::default()
        },
        postprocess: PostprocessConfig {
            row_stride: 5,
            kernel: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn ablation_scaffolding() {
    let forward: Vec<(usize, usize)> = (1..=4).flat_map(|i| (i + 1..=4).map(move |j| (i, j))).collect();
    assert_eq!(forward.len(), 6);
    assert_eq!(validate_paths(&forward, 4, false).unwrap(), 6);
    let mut seven = forward.clone();
    seven.push((4, 3));
    assert!(matches!(validate_paths(&seven, 4, true), Err(Error::InvalidPaths(_))));
    assert!(matches!(validate_paths(&[(3, 2)], 4, false), Err(Error::InvalidPaths(_))));
    assert!(validate_paths(&[(3, 2), (4, 2)], 4, true).is_ok());
    assert!(validate_paths(&[(2, 3), (2, 3)], 4, false).is_err());
    assert!(validate_paths(&[(0, 1)], 4, false).is_err());
    assert!(validate_paths(&[(2, 5)], 4, false).is_err());

    let mut bad = tiny_run_config();
    bad.train.mode = Mode::Sad;
    bad.sad.paths = vec![(4, 2)];
    assert!(bad.validate().is_err());
    bad.sad.allow_backward_paths = true;
    bad.validate().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config();
    let rows = pipeline::ablate_paths(&cfg, &pipeline::default_path_sets(), dir.path(), |_, _| {}).unwrap();
    let table = std::fs::read_to_string(dir.path().join("ablation.md")).unwrap();
    assert_eq!(table, pipeline::render_table(&rows));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "| Paths | Best val F1 | Final val F1 | Final loss |");
    assert_eq!(lines[1], "|---|---|---|---|");
    for (line, label) in lines[2..].iter().zip(["P23, P34", "P24, P34", "P12"]) {
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        assert_eq!(cells.len(), 4, "{line}");
        assert_eq!(cells[0], label);
        for pct in &cells[1..3] {
            let v: f64 = pct.trim_end_matches('%').parse().unwrap();
            assert!((0.0..=100.0).contains(&v));
        }
        assert!(cells[3].parse::<f64>().unwrap().is_finite());
    }
    for k in 1..=3 {
        assert!(dir.path().join(format!("set{k}/final/manifest.json")).exists());
    }
}

fn postprocessing() {
    let cfg = PostprocessConfig::default();
    assert_eq!(cfg.row_stride, 20);
    for (h, rows) in [
        (128, vec![127, 107, 87, 67, 47, 27, 7]),
        (288, (0..15).map(|k| 287 - 20 * k).collect()),
        (20, vec![19]),
        (21, vec![20, 0]),
    ] {
        assert_eq!(sampled_rows(h, 20), rows);
        let w = 8;
        let map = vec![1.0; h * w];
        let pts = extract_points(&map, h, w, 1.0, &cfg).unwrap();
        let got: Vec<usize> = pts.iter().map(|p| p.0 as usize).collect();
        assert_eq!(got, rows);
        assert!(pts.iter().all(|p| p.1 == 0.0));
        assert_eq!(extract_points(&map, h, w, 1.0, &cfg), extract_points(&map, h, w, 1.0, &cfg));
    }

    let dir = tempfile::tempdir().unwrap();
    let data = DataConfig {
        train_count: 1,
        val_count: 100,
        seed: 8,
        ..Default::default()
    };
    pipeline::gen_data(&data, dir.path()).unwrap();
    let val = dir.path().join("val");
    let pred = dir.path().join("pred");
    let n = pipeline::infer(&Source::Oracle, &val, &pred, &cfg, 8).unwrap();
    assert_eq!(n, 100);
    let report = pipeline::eval_dir(&pred, &val, &EvalConfig::default()).unwrap();
    assert_eq!(report.f1, Some(1.0));
    assert_eq!(report.precision, Some(1.0));
    assert_eq!(report.recall, Some(1.0));
}

/// Baseline and distillation runs share their first `activation_episode`
/// episodes exactly (criterion 5), so both continue from one trained
/// prefix.
#[test]
#[ignore]
fn criterion_6_desk_scale_benefit() {
    let data = DataConfig::default();
    let train_set = pipeline::load_split(&data, pipeline::Split::Train).unwrap();
    let val_set = pipeline::load_split(&data, pipeline::Split::Val).unwrap();
    assert_eq!((train_set.len(), val_set.len()), (500, 100));
    let model_cfg = ModelConfig::default();
    assert_eq!((model_cfg.input_h, model_cfg.input_w), (128, 256));

    let setup = |mode| TrainSetup {
        train: TrainConfig {
            total_episodes: 2000,
            mode,
            val_every: 0,
            ..Default::default()
        },
        sad: SadConfig {
            activation_episode: 1000,
            paths: vec![(2, 3), (3, 4)],
            ..Default::default()
        },
        loss: LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            ..Default::default()
        },
        ..Default::default()
    };
    let post = PostprocessConfig::default();
    let eval = EvalConfig::default();
    let mut wins = 0;
    for seed in 0..5u64 {
        let t = std::time::Instant::now();
        let mut base_setup = setup(Mode::Baseline);
        base_setup.train.seed = seed;
        let mut sad_setup = setup(Mode::Sad);
        sad_setup.train.seed = seed;
        let none = RunOutput::default();
        let model = Model::<f32>::build(model_cfg.clone(), seed).unwrap();
        let prefix = train_until(TrainState::new(model), &train_set, &[], &base_setup, 1000, &none, |_| {}).unwrap();
        let base = train_until(prefix.state.clone(), &train_set, &[], &base_setup, 2000, &none, |_| {}).unwrap();
        let sad = train_until(prefix.state, &train_set, &[], &sad_setup, 2000, &none, |_| {}).unwrap();
        let f_base = evaluate(&base.state.model, &val_set, &post, &eval).unwrap().f1.unwrap();
        let f_sad = evaluate(&sad.state.model, &val_set, &post, &eval).unwrap().f1.unwrap();
        if f_sad >= f_base {
            wins += 1;
        }
        report(&format!(
            "criterion 6: seed {seed}  baseline F1 {f_base:.4}  sad F1 {f_sad:.4}  ({:.0}s)",
            t.elapsed().as_secs_f64()
        ));
    }
    let verdict = if wins >= 4 { "PASS" } else { "FAIL" };
    report(&format!("criterion 6: {verdict}  distillation F1 >= baseline in {wins} of 5 seeds"));
    assert!(wins >= 4);
}
