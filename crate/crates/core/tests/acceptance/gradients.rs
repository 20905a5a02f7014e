//! Tape gradients against central differences, in f64, over random
//! instances of every primitive and of the full training objective.

use std::sync::Arc;

use crate::common::{gradcheck, gradcheck_at, tiny_data, tiny_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadkit::attention::{atgen, attention_map, Mapping};
use sadkit::autodiff::{Tape, Var};
use sadkit::losses::{self, DistillOptions, DistillTerm, IouForm, LossInputs, LossWeights};
use sadkit::model::{Model, ModelConfig};
use sadkit::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

/// Runs `case` on `INSTANCES` seeded generators and fails on the worst error.
fn each(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut worst = 0.0f64;
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9);
        worst = worst.max(case(&mut rng));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Magnitudes in `[0.2, 1.5]` with random sign, clear of kinks at zero.
fn away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..2.0))
}

/// Random `[C,H,W]` or `[N,C,H,W]` with even spatial sides.
fn act_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let c = rng.gen_range(1..4);
    let h = 2 * rng.gen_range(1..4);
    let w = 2 * rng.gen_range(1..4);
    if rng.gen_bool(0.5) {
        vec![c, h, w]
    } else {
        vec![rng.gen_range(1..3), c, h, w]
    }
}

/// Dot product with fixed random weights, so every output element matters.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum_all(p)
}

fn unary(name: &str, gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>, op: fn(&mut Tape<f64>, Var) -> Var) {
    each(name, |rng| {
        let shape = act_shape(rng);
        let x = gen(rng, &shape);
        let seed = rng.gen();
        gradcheck(&[x], EPS, |t, v| {
            let y = op(t, v[0]);
            project(t, y, seed)
        })
    });
}

fn binary(name: &str, gen_b: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>, op: fn(&mut Tape<f64>, Var, Var) -> Var) {
    each(name, |rng| {
        let shape = act_shape(rng);
        let a = normal(rng, &shape);
        let b = gen_b(rng, &shape);
        let seed = rng.gen();
        gradcheck(&[a, b], EPS, |t, v| {
            let y = op(t, v[0], v[1]);
            project(t, y, seed)
        })
    });
}

fn elementwise_binary() {
    binary("add", normal, |t, a, b| t.add(a, b).unwrap());
    binary("sub", normal, |t, a, b| t.sub(a, b).unwrap());
    binary("mul", normal, |t, a, b| t.mul(a, b).unwrap());
    binary("div", away, |t, a, b| t.div(a, b).unwrap());
}

fn elementwise_unary() {
    unary("affine", normal, |t, x| t.affine(x, -1.7, 0.3));
    unary("relu", away, |t, x| t.relu(x));
    unary("sigmoid", normal, |t, x| t.sigmoid(x));
    unary("log", positive, |t, x| t.log(x));
    unary("square", normal, |t, x| t.pow_abs(x, 2.0));
    unary("abs", away, |t, x| t.pow_abs(x, 1.0));
    each("pow_abs", |rng| {
        let shape = act_shape(rng);
        let x = away(rng, &shape);
        let p = rng.gen_range(1.0..3.5);
        let seed = rng.gen();
        gradcheck(&[x], EPS, |t, v| {
            let y = t.pow_abs(v[0], p);
            project(t, y, seed)
        })
    });
}

fn reductions_and_reshapes() {
    unary("sum_all", normal, |t, x| {
        let s = t.sum_all(x);
        t.pow_abs(s, 2.0)
    });
    unary("mean_all", normal, |t, x| {
        let s = t.mean_all(x);
        t.pow_abs(s, 2.0)
    });
    unary("sum_channels", normal, |t, x| t.sum_channels(x).unwrap());
    unary("max_channels", away, |t, x| t.max_channels(x).unwrap());
    unary("select_channel", normal, |t, x| t.select_channel(x, 0).unwrap());
    unary("flatten", normal, |t, x| t.flatten(x).unwrap());
    unary("reshape", normal, |t, x| {
        let n = t.value(x).len();
        t.reshape(x, &[n]).unwrap()
    });
    each("concat_channels", |rng| {
        let mut sa = act_shape(rng);
        let mut sb = sa.clone();
        let r = sa.len();
        sa[r - 3] = rng.gen_range(1..4);
        sb[r - 3] = rng.gen_range(1..4);
        let (a, b) = (normal(rng, &sa), normal(rng, &sb));
        let seed = rng.gen();
        gradcheck(&[a, b], EPS, |t, v| {
            let y = t.concat_channels(v[0], v[1]).unwrap();
            project(t, y, seed)
        })
    });
}

fn pooling_and_softmax() {
    unary("max_pool2", away, |t, x| t.max_pool2(x).unwrap());
    unary("avg_pool2", normal, |t, x| t.avg_pool2(x).unwrap());
    unary("spatial_softmax", normal, |t, x| t.spatial_softmax(x).unwrap());
    unary("channel_softmax", normal, |t, x| t.channel_softmax(x).unwrap());
}

fn fully_connected() {
    each("fully_connected", |rng| {
        let din = rng.gen_range(1..7);
        let dout = rng.gen_range(1..5);
        let x = if rng.gen_bool(0.5) {
            normal(rng, &[din])
        } else {
            let n = rng.gen_range(1..4);
            normal(rng, &[n, din])
        };
        let w = normal(rng, &[dout, din]);
        let b = normal(rng, &[dout]);
        let seed = rng.gen();
        gradcheck(&[x, w, b], EPS, |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        })
    });
}

fn conv2d() {
    each("conv2d", |rng| {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = [1, 2, 3][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let dilation = if k > 1 { rng.gen_range(1..3) } else { 1 };
        let padding = rng.gen_range(0..3);
        let extent = dilation * (k - 1) + 1;
        // Input side giving an integral output of `o` rows.
        let side = |rng: &mut ChaCha8Rng| {
            let mut o = rng.gen_range(1..4);
            while (o - 1) * stride + extent <= 2 * padding {
                o += 1;
            }
            (o - 1) * stride + extent - 2 * padding
        };
        let (h, w) = (side(rng), side(rng));
        let shape = if rng.gen_bool(0.5) {
            vec![cin, h, w]
        } else {
            vec![2, cin, h, w]
        };
        let x = normal(rng, &shape);
        let kern = normal(rng, &[cout, cin, k, k]);
        let bias = normal(rng, &[cout]);
        let with_bias = rng.gen_bool(0.7);
        let seed = rng.gen();
        gradcheck(&[x, kern, bias], EPS, |t, v| {
            let b = with_bias.then_some(v[2]);
            let y = t.conv2d(v[0], v[1], b, stride, padding, dilation).unwrap();
            project(t, y, seed)
        })
    });
}

fn bilinear_resize() {
    each("bilinear_upsample", |rng| {
        let shape = act_shape(rng);
        let x = normal(rng, &shape);
        let (oh, ow) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let seed = rng.gen();
        gradcheck(&[x], EPS, |t, v| {
            let y = t.bilinear_upsample(v[0], oh, ow).unwrap();
            project(t, y, seed)
        })
    });
}

fn channel_norms() {
    each("channel_norm_train", |rng| {
        let mut shape = act_shape(rng);
        if shape.len() == 3 {
            shape.insert(0, 2);
        }
        let c = shape[1];
        let x = normal(rng, &shape);
        let g = normal(rng, &[c]);
        let b = normal(rng, &[c]);
        let seed = rng.gen();
        gradcheck(&[x, g, b], EPS, |t, v| {
            let (y, _, _) = t.channel_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, y, seed)
        })
    });
    each("channel_norm_eval", |rng| {
        let shape = act_shape(rng);
        let c = shape[shape.len() - 3];
        let x = normal(rng, &shape);
        let g = normal(rng, &[c]);
        let b = normal(rng, &[c]);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..2.0)).collect();
        let seed = rng.gen();
        gradcheck(&[x, g, b], EPS, |t, v| {
            let y = t.channel_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap();
            project(t, y, seed)
        })
    });
}

fn cross_entropies() {
    each("weighted_cross_entropy", |rng| {
        let mut shape = act_shape(rng);
        let r = shape.len();
        shape[r - 3] = rng.gen_range(2..5);
        let c = shape[r - 3];
        let pixels = shape.iter().product::<usize>() / c;
        let labels: Arc<Vec<u8>> = Arc::new((0..pixels).map(|_| rng.gen_range(0..c) as u8).collect());
        let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..1.5)).collect();
        let x = normal(rng, &shape);
        gradcheck(&[x], EPS, |t, v| t.weighted_cross_entropy(v[0], labels.clone(), &weights).unwrap())
    });
    each("binary_cross_entropy", |rng| {
        let n = rng.gen_range(1..9);
        let p = Tensor::from_fn(&[n], |_| rng.gen_range(0.05..0.95));
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        gradcheck(&[p], EPS, |t, v| t.binary_cross_entropy(v[0], &y).unwrap())
    });
}

fn attention_maps() {
    each("atgen", |rng| {
        let shape = act_shape(rng);
        let x = normal(rng, &shape);
        let (th, tw) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let seed = rng.gen();
        gradcheck(&[x], EPS, |t, v| {
            let y = atgen(t, v[0], th, tw).unwrap();
            project(t, y, seed)
        })
    });
    for (name, mapping) in [
        ("g_sum", Mapping::Sum),
        ("g_sum_p", Mapping::SumP { p: 3.0 }),
        ("g_max_p", Mapping::MaxP { p: 2.0 }),
    ] {
        each(name, |rng| {
            let shape = act_shape(rng);
            let x = away(rng, &shape);
            let seed = rng.gen();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            gradcheck(&[x], EPS, |t, v| {
                let y = attention_map(t, v[0], mapping, h, w).unwrap();
                project(t, y, seed)
            })
        });
    }
}

/// Four activations with halving sizes, like the encoder taps.
fn pyramid(rng: &mut ChaCha8Rng, batch: Option<usize>) -> Vec<Tensor<f64>> {
    let (mut h, mut w) = (2 * rng.gen_range(4..7), 2 * rng.gen_range(4..7));
    (0..4)
        .map(|i| {
            let c = rng.gen_range(1..4);
            let shape = match batch {
                Some(n) => vec![n, c, h, w],
                None => vec![c, h, w],
            };
            if i < 2 {
                h /= 2;
                w /= 2;
            }
            normal(rng, &shape)
        })
        .collect()
}

fn distillation_loss() {
    each("distill_loss", |rng| {
        let batch = rng.gen_bool(0.5).then_some(2);
        let acts = pyramid(rng, batch);
        let all = losses::adjacent_paths(4);
        let paths: Vec<_> = all.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
        let paths = if paths.is_empty() { vec![(1, 4)] } else { paths };
        let opts = DistillOptions {
            detach_target: false,
            allow_backward: false,
        };
        gradcheck(&acts, EPS, |t, v| losses::distill_loss(t, v, &paths, opts).unwrap())
    });
}

fn iou_losses() {
    for form in [IouForm::Literal, IouForm::Jaccard] {
        each("iou_loss", |rng| {
            let mut shape = act_shape(rng);
            let r = shape.len();
            shape[r - 3] = rng.gen_range(2..5);
            let c = shape[r - 3];
            let pixels = shape.iter().product::<usize>() / c;
            let labels: Vec<u8> = (0..pixels).map(|_| rng.gen_range(0..c) as u8).collect();
            let x = normal(rng, &shape);
            gradcheck(&[x], EPS, |t, v| losses::iou_loss(t, v[0], &labels, form).unwrap())
        });
    }
}

fn total_loss_composition() {
    each("total_loss", |rng| {
        let n = rng.gen_range(1..3);
        let (c, h, w) = (rng.gen_range(2..5), 2 * rng.gen_range(2..4), 2 * rng.gen_range(2..4));
        let slots = c - 1;
        let logits = normal(rng, &[n, c, h, w]);
        let deep = normal(rng, &[n, c, h, w]);
        let exist = Tensor::from_fn(&[n, slots], |_| rng.gen_range(0.05..0.95));
        let mut inputs = vec![logits, exist, deep];
        inputs.extend(pyramid(rng, Some(n)));
        let labels: Arc<Vec<u8>> = Arc::new((0..n * h * w).map(|_| rng.gen_range(0..c) as u8).collect());
        let bits: Vec<f64> = (0..n * slots).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let weights = LossWeights {
            alpha: rng.gen_range(0.0..2.0),
            beta: rng.gen_range(0.0..2.0),
            gamma: rng.gen_range(0.01..2.0),
            ..Default::default()
        };
        let paths = [(1, 2), (2, 3), (3, 4)];
        gradcheck(&inputs, EPS, |t, v| {
            let li = LossInputs {
                logits: v[0],
                labels: labels.clone(),
                exist_probs: Some(v[1]),
                exist_bits: &bits,
                activations: &v[3..],
                deep_logits: &v[2..3],
            };
            let d = DistillTerm {
                paths: &paths,
                opts: DistillOptions {
                    detach_target: false,
                    allow_backward: false,
                },
            };
            losses::total_loss(t, &li, &weights, Some(d)).unwrap().total
        })
    });
}

/// The objective through the network, at sampled parameter coordinates.
/// Norm shifts and scales move a whole channel across ReLU and max-pool
/// kinks at once, so a coordinate that fails at `EPS` is retried with
/// smaller steps before it counts.
fn model_case(cfg: ModelConfig, coords_per_instance: usize) {
    let data = tiny_data(INSTANCES as usize * 2, 21);
    each("model total_loss", |rng| {
        let model = Model::<f64>::build(cfg.clone(), rng.gen()).unwrap();
        let i = rng.gen_range(0..data.len() - 1);
        let pair = [&data[i], &data[i + 1]];
        let images: Vec<Tensor<f64>> = pair.iter().map(|s| s.image.cast()).collect();
        let x = Tensor::stack(&images.iter().collect::<Vec<_>>()).unwrap();
        let labels = Arc::new(pair.iter().flat_map(|s| s.labels.iter().copied()).collect::<Vec<u8>>());
        let bits: Vec<f64> = pair.iter().flat_map(|s| s.exist.iter().map(|&b| f64::from(b))).collect();
        let params = model.params().to_vec();
        let paths = [(1, 2), (2, 3), (3, 4)];
        let f = |t: &mut Tape<f64>, vars: &[Var]| {
            let xv = t.constant(x.clone());
            let out = model.forward(t, vars, xv, true).unwrap();
            let inputs = LossInputs {
                logits: out.seg_logits,
                labels: labels.clone(),
                exist_probs: out.exist_probs,
                exist_bits: &bits,
                activations: &out.activations,
                deep_logits: &out.deep_logits,
            };
            let d = DistillTerm {
                paths: &paths,
                opts: DistillOptions {
                    detach_target: false,
                    allow_backward: false,
                },
            };
            losses::total_loss(t, &inputs, &LossWeights::default(), Some(d)).unwrap().total
        };
        (0..coords_per_instance)
            .map(|_| {
                let k = rng.gen_range(0..params.len());
                let c = [(k, rng.gen_range(0..params[k].len()))];
                [EPS, EPS / 10.0, EPS / 100.0]
                    .iter()
                    .map(|&eps| gradcheck_at(&params, eps, &c, f))
                    .find(|&e| e < TOL)
                    .unwrap_or(f64::INFINITY)
            })
            .fold(0.0, f64::max)
    });
}

fn total_loss_through_tiny_model() {
    model_case(tiny_model(), 20);
}

fn total_loss_through_deep_heads() {
    let cfg = ModelConfig {
        deep_supervision_blocks: vec![2, 4],
        ..tiny_model()
    };
    model_case(cfg, 8);
}

/// Every case above; panics on the first failure.
pub fn all() {
    elementwise_binary();
    elementwise_unary();
    reductions_and_reshapes();
    pooling_and_softmax();
    fully_connected();
    conv2d();
    bilinear_resize();
    channel_norms();
    cross_entropies();
    attention_maps();
    distillation_loss();
    iou_losses();
    total_loss_composition();
    total_loss_through_tiny_model();
    total_loss_through_deep_heads();
}
