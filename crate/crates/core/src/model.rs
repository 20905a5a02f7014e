//! Miniature ENet-style encoder/decoder with four tapped encoder blocks, a
//! lane-existence branch and optional deep-supervision heads.
//!
//! Layout (input `H x W`):
//!
//! ```text
//! E1  2x2/2 conv -> 3x3 conv                     A1  c1 x H/2 x W/2
//! E2  2x2/2 conv -> 3x3 conv                     A2  c2 x H/4 x W/4
//! E3  2x2/2 conv -> 3x3 conv (dil 2)             A3  c3 x H/8 x W/8
//! E4  3x3 conv (dil 2) -> 3x3 conv (dil 4)       A4  c4 x H/8 x W/8
//! D1  resize x2 of [A3 | A4] -> 1x1 -> 3x3       c2 x H/4
//! D2  resize x2 -> 1x1 -> 3x3                    c1 x H/2
//! head 1x1 -> resize to H x W                    N_c x H x W
//! P1  A4 -> 3x3 conv (dil 4) -> 1x1 -> softmax -> avgpool -> fc -> fc -> sigmoid
//! ```
//!
//! Every conv except the 1x1 class projections is followed by channel norm
//! and ReLU and carries no bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NUM_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExistSoftmax {
    /// Softmax across the projected channels at every pixel.
    #[default]
    Channel,
    /// Softmax over all spatial positions of each projected channel.
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub lane_slots: usize,
    pub widths: [usize; NUM_BLOCKS],
    pub enable_e3_e4_concat: bool,
    pub existence_branch: bool,
    pub exist_width: usize,
    pub exist_hidden: usize,
    pub exist_softmax: ExistSoftmax,
    pub deep_supervision_blocks: Vec<usize>,
    pub fence_existence: bool,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 128,
            input_w: 256,
            in_channels: 3,
            num_classes: 5,
            lane_slots: 4,
            widths: [8, 16, 32, 32],
            enable_e3_e4_concat: true,
            existence_branch: true,
            exist_width: 32,
            exist_hidden: 128,
            exist_softmax: ExistSoftmax::Channel,
            deep_supervision_blocks: Vec::new(),
            fence_existence: false,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(8) || !self.input_w.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "input size {}x{} must be a positive multiple of 8",
                self.input_h, self.input_w
            )));
        }
        if self.existence_branch && (self.input_h < 16 || self.input_w < 16) {
            return Err(Error::invalid("existence branch needs input of at least 16x16"));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.lane_slots == 0 {
            return Err(Error::invalid(
                "need in_channels >= 1, num_classes >= 2 and lane_slots >= 1",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid(format!("block widths must be positive: {:?}", self.widths)));
        }
        if self.existence_branch && (self.exist_width == 0 || self.exist_hidden == 0) {
            return Err(Error::invalid("existence branch widths must be positive"));
        }
        let mut seen = [false; NUM_BLOCKS + 1];
        for &b in &self.deep_supervision_blocks {
            if !(2..=4).contains(&b) || std::mem::replace(&mut seen[b], true) {
                return Err(Error::invalid(format!(
                    "deep supervision blocks must be distinct members of {{2,3,4}}, got {:?}",
                    self.deep_supervision_blocks
                )));
            }
        }
        if !(self.norm_eps > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::invalid("norm_eps must be > 0 and norm_momentum in [0,1]"));
        }
        Ok(())
    }

    /// Spatial size of each tapped activation.
    pub fn block_sizes(&self) -> [(usize, usize); NUM_BLOCKS] {
        let (h, w) = (self.input_h, self.input_w);
        [(h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8), (h / 8, w / 8)]
    }

    /// Length of the flattened existence feature vector.
    pub fn exist_flatten_len(&self) -> usize {
        let (h, w) = self.block_sizes()[3];
        self.num_classes * (h / 2) * (w / 2)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    gamma: usize,
    beta: usize,
    stat: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ExistBranch {
    dilated: ConvNorm,
    proj: Conv,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: [Vec<ConvNorm>; NUM_BLOCKS],
    decoder: [Vec<ConvNorm>; 2],
    head: Conv,
    exist: Option<ExistBranch>,
    deep: Vec<(usize, Conv)>,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    norm_widths: Vec<usize>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, spd: (usize, usize, usize)) -> Conv {
        let w = self.param(
            format!("{name}.weight"),
            vec![c_out, c_in, k, k],
            Init::Uniform { fan_in: c_in * k * k },
        );
        let b = bias.then(|| self.param(format!("{name}.bias"), vec![c_out], Init::Zeros));
        Conv {
            w,
            b,
            stride: spd.0,
            padding: spd.1,
            dilation: spd.2,
        }
    }

    fn conv_norm(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, spd: (usize, usize, usize)) -> ConvNorm {
        let conv = self.conv(name, c_in, c_out, k, false, spd);
        let gamma = self.param(format!("{name}.norm.scale"), vec![c_out], Init::Ones);
        let beta = self.param(format!("{name}.norm.shift"), vec![c_out], Init::Zeros);
        self.norm_widths.push(c_out);
        ConvNorm {
            conv,
            gamma,
            beta,
            stat: self.norm_widths.len() - 1,
        }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = self.param(format!("{name}.weight"), vec![d_out, d_in], Init::Uniform { fan_in: d_in });
        let b = self.param(format!("{name}.bias"), vec![d_out], Init::Zeros);
        Linear { w, b }
    }
}

/// Per-channel running mean and variance of one norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Class scores (pre-softmax), `[N_c,H,W]` or `[N,N_c,H,W]`.
    pub seg_logits: Var,
    /// Lane existence probabilities, `[L]` or `[N,L]`.
    pub exist_probs: Option<Var>,
    /// Tapped block outputs `A_1..A_4`.
    pub activations: Vec<Var>,
    pub deep_logits: Vec<Var>,
    /// Batch mean/variance per norm layer (training mode only).
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
    /// Named intermediate nodes of the existence branch.
    pub exist_trace: Vec<(&'static str, Var)>,
}

const K2S2: (usize, usize, usize) = (2, 0, 1);
const K3: (usize, usize, usize) = (1, 1, 1);
const K1: (usize, usize, usize) = (1, 0, 1);

fn dil(d: usize) -> (usize, usize, usize) {
    (1, d, d)
}

impl<T: Scalar> Model<T> {
    /// Builds a model with fan-in scaled uniform weights drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.widths;
        let nc = config.num_classes;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            norm_widths: Vec::new(),
        };
        let encoder = [
            vec![
                b.conv_norm("e1.down", config.in_channels, c1, 2, K2S2),
                b.conv_norm("e1.conv", c1, c1, 3, K3),
            ],
            vec![b.conv_norm("e2.down", c1, c2, 2, K2S2), b.conv_norm("e2.conv", c2, c2, 3, K3)],
            vec![b.conv_norm("e3.down", c2, c3, 2, K2S2), b.conv_norm("e3.conv", c3, c3, 3, dil(2))],
            vec![b.conv_norm("e4.conv1", c3, c4, 3, dil(2)), b.conv_norm("e4.conv2", c4, c4, 3, dil(4))],
        ];
        let fused = if config.enable_e3_e4_concat { c3 + c4 } else { c4 };
        let decoder = [
            vec![b.conv_norm("d1.proj", fused, c2, 1, K1), b.conv_norm("d1.conv", c2, c2, 3, K3)],
            vec![b.conv_norm("d2.proj", c2, c1, 1, K1), b.conv_norm("d2.conv", c1, c1, 3, K3)],
        ];
        let head = b.conv("head", c1, nc, 1, true, K1);
        let exist = config.existence_branch.then(|| ExistBranch {
            dilated: b.conv_norm("p1.dilated", c4, config.exist_width, 3, dil(4)),
            proj: b.conv("p1.proj", config.exist_width, nc, 1, true, K1),
            fc1: b.linear("p1.fc1", config.exist_flatten_len(), config.exist_hidden),
            fc2: b.linear("p1.fc2", config.exist_hidden, config.lane_slots),
        });
        let deep = config
            .deep_supervision_blocks
            .iter()
            .map(|&blk| {
                let c = config.widths[blk - 1];
                (blk, b.conv(&format!("deep{blk}.head"), c, nc, 1, true, K1))
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Uniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        let running = b
            .norm_widths
            .iter()
            .map(|&c| RunningStats {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            })
            .collect();
        Ok(Model {
            config,
            layout: Layout {
                encoder,
                decoder,
                head,
                exist,
                deep,
            },
            names: b.names,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Enables or disables the gradient fence between the existence branch
    /// and the encoder. Forward values are unaffected.
    pub fn with_gradient_fence(mut self, on: bool) -> Self {
        self.config.fence_existence = on;
        self
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.f64())).collect();
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
        }
    }

    /// Indices of parameters that belong to the encoder blocks.
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        (0..self.names.len())
            .filter(|&i| {
                let n = self.names[i].as_bytes();
                n[0] == b'e' && n[1].is_ascii_digit()
            })
            .collect()
    }

    /// Pushes every parameter onto the tape, in declaration order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[(Vec<T>, Vec<T>)]) {
        let m = T::of(self.config.norm_momentum);
        let keep = T::one() - m;
        for (r, (mean, var)) in self.running.iter_mut().zip(batch) {
            for (a, &b) in r.mean.iter_mut().zip(mean) {
                *a = keep * *a + m * b;
            }
            for (a, &b) in r.var.iter_mut().zip(var) {
                *a = keep * *a + m * b;
            }
        }
    }

    fn conv(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, c: &Conv) -> Result<Var> {
        tape.conv2d(x, vars[c.w], c.b.map(|b| vars[b]), c.stride, c.padding, c.dilation)
    }

    fn conv_norm(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        l: &ConvNorm,
        training: bool,
        stats: &mut [(Vec<T>, Vec<T>)],
    ) -> Result<Var> {
        let y = self.conv(tape, vars, x, &l.conv)?;
        let eps = self.config.norm_eps;
        let z = if training {
            let (z, mean, var) = tape.channel_norm_train(y, vars[l.gamma], vars[l.beta], eps)?;
            stats[l.stat] = (mean, var);
            z
        } else {
            let r = &self.running[l.stat];
            tape.channel_norm_eval(y, vars[l.gamma], vars[l.beta], &r.mean, &r.var, eps)?
        };
        Ok(tape.relu(z))
    }

    /// Runs the network on `x` (`[C,H,W]` or `[N,C,H,W]`) using parameter
    /// nodes from [`Model::bind`]. Training mode normalizes with batch
    /// statistics and reports them in the output.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, training: bool) -> Result<ForwardOutput<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} parameter nodes bound, model has {}",
                vars.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let expect = (cfg.in_channels, cfg.input_h, cfg.input_w);
        let got = match *tape.shape(x) {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            ref s => return Err(Error::shape(format!("input must be rank 3 or 4, got {s:?}"))),
        };
        if got != expect {
            return Err(Error::shape(format!(
                "input is {got:?} (C,H,W) but the model expects {expect:?}"
            )));
        }
        let mut stats = vec![(Vec::new(), Vec::new()); self.running.len()];

        let mut activations = Vec::with_capacity(NUM_BLOCKS);
        let mut h = x;
        for block in &self.layout.encoder {
            for l in block {
                h = self.conv_norm(tape, vars, h, l, training, &mut stats)?;
            }
            activations.push(h);
        }
        let [a1, _, a3, a4] = activations[..] else { unreachable!() };

        let (h8, w8) = cfg.block_sizes()[2];
        let fused = if cfg.enable_e3_e4_concat {
            let a4m = tape.bilinear_upsample(a4, h8, w8)?;
            tape.concat_channels(a3, a4m)?
        } else {
            a4
        };
        let mut d = fused;
        for (stage, block) in self.layout.decoder.iter().enumerate() {
            let (th, tw) = cfg.block_sizes()[1 - stage];
            d = tape.bilinear_upsample(d, th, tw)?;
            for l in block {
                d = self.conv_norm(tape, vars, d, l, training, &mut stats)?;
            }
        }
        debug_assert_eq!(spatial(tape, d), spatial(tape, a1));
        let head = self.conv(tape, vars, d, &self.layout.head)?;
        let seg_logits = tape.bilinear_upsample(head, cfg.input_h, cfg.input_w)?;

        let mut exist_trace = Vec::new();
        let exist_probs = match &self.layout.exist {
            Some(p1) => {
                let src = if cfg.fence_existence { tape.detach(a4) } else { a4 };
                let e = self.conv_norm(tape, vars, src, &p1.dilated, training, &mut stats)?;
                exist_trace.push(("dilated", e));
                let e = self.conv(tape, vars, e, &p1.proj)?;
                exist_trace.push(("proj", e));
                let e = match cfg.exist_softmax {
                    ExistSoftmax::Channel => tape.channel_softmax(e)?,
                    ExistSoftmax::Spatial => tape.spatial_softmax(e)?,
                };
                let e = tape.avg_pool2(e)?;
                exist_trace.push(("pooled", e));
                let e = tape.flatten(e)?;
                exist_trace.push(("flatten", e));
                let e = tape.fully_connected(e, vars[p1.fc1.w], vars[p1.fc1.b])?;
                let e = tape.relu(e);
                exist_trace.push(("hidden", e));
                let e = tape.fully_connected(e, vars[p1.fc2.w], vars[p1.fc2.b])?;
                Some(tape.sigmoid(e))
            }
            None => None,
        };

        let mut deep_logits = Vec::with_capacity(self.layout.deep.len());
        for (blk, conv) in &self.layout.deep {
            let s = self.conv(tape, vars, activations[blk - 1], conv)?;
            deep_logits.push(tape.bilinear_upsample(s, cfg.input_h, cfg.input_w)?);
        }

        Ok(ForwardOutput {
            seg_logits,
            exist_probs,
            activations,
            deep_logits,
            batch_stats: if training { stats } else { Vec::new() },
            exist_trace,
        })
    }

    /// Rebuilds a model from stored parameter and running-stat tensors.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>, running: Vec<RunningStats<T>>) -> Result<Self> {
        let mut m = Model::build(config, 0)?;
        if params.len() != m.params.len() || running.len() != m.running.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters and {} norm layers, got {} and {}",
                m.params.len(),
                m.running.len(),
                params.len(),
                running.len()
            )));
        }
        for (i, (p, q)) in params.iter().zip(&m.params).enumerate() {
            if p.shape() != q.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    m.names[i],
                    p.shape(),
                    q.shape()
                )));
            }
        }
        for (r, q) in running.iter().zip(&m.running) {
            if r.mean.len() != q.mean.len() || r.var.len() != q.var.len() {
                return Err(Error::shape("running statistics width mismatch"));
            }
        }
        m.params = params;
        m.running = running;
        Ok(m)
    }
}

fn spatial<T: Scalar>(tape: &Tape<T>, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[s.len() - 2], s[s.len() - 1])
}
