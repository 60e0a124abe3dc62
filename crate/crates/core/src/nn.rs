//! Convolutional building blocks shared by both backbone branches, the
//! fusion chains and the neck: conv-BN-SiLU units, the CSP-style stage
//! block, SPPF and the decoupled detection head.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{batch_norm, concat, conv2d, BatchNormState, Conv2dSpec, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;

/// Named trainable tensors, in a stable traversal order.
pub type ParamList = Vec<(String, Tensor)>;

pub trait Module {
    fn collect_params(&self, prefix: &str, out: &mut ParamList);

    fn parameters(&self) -> ParamList {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization of a trainable leaf.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).requires_grad()
}

/// Per-forward execution context: train/eval flag, the random stream used by
/// dropout, and an optional trace of named intermediates for inspection.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    trace: Option<RefCell<Vec<(&'static str, Tensor)>>>,
}

impl Ctx {
    pub fn eval() -> Ctx {
        Ctx { train: false, rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)), trace: None }
    }

    pub fn train(seed: u64) -> Ctx {
        Ctx { train: true, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)), trace: None }
    }

    pub fn traced(mut self) -> Ctx {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn record(&self, name: &'static str, t: &Tensor) {
        if let Some(tr) = &self.trace {
            tr.borrow_mut().push((name, t.clone()));
        }
    }

    /// All recorded tensors with the given name, in recording order.
    pub fn recorded(&self, name: &str) -> Vec<Tensor> {
        self.trace
            .as_ref()
            .map(|tr| tr.borrow().iter().filter(|(n, _)| *n == name).map(|(_, t)| t.clone()).collect())
            .unwrap_or_default()
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        x.dropout(p, self.train, &mut *self.rng.borrow_mut())
    }
}

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    if x.rank() != 4 || x.dim(1) != expected {
        return shape_err(format!(
            "{what} expects [B, {expected}, H, W], got {:?}",
            x.shape()
        ));
    }
    Ok(())
}

/// Plain convolution with bias, no normalization or activation.
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, k: usize, groups: usize, bias: bool, rng: &mut impl Rng) -> Conv {
        let fan_in = cin / groups * k * k;
        let weight = init_uniform(&[cout, cin / groups, k, k], fan_in, rng);
        let bias = bias.then(|| init_uniform(&[cout], fan_in, rng));
        Conv { weight, bias, spec: Conv2dSpec::new(1, k / 2, groups) }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1) * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }

    /// Multiply-accumulates for an output of `hw_out` positions.
    pub fn macs(&self, hw_out: usize) -> u64 {
        (self.weight.numel() * hw_out) as u64
    }
}

impl Module for Conv {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Bias-free convolution, batch norm, optional SiLU.
pub struct ConvBnAct {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BatchNormState,
    pub spec: Conv2dSpec,
    pub act: bool,
}

impl ConvBnAct {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> ConvBnAct {
        ConvBnAct {
            weight: init_uniform(&[cout, cin, k, k], cin * k * k, rng),
            gamma: Tensor::full(&[cout], 1.0).requires_grad(),
            beta: Tensor::zeros(&[cout]).requires_grad(),
            bn: BatchNormState::new(cout, BN_MOMENTUM, BN_EPS),
            spec: Conv2dSpec::new(stride, k / 2, 1),
            act: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn stride(&self) -> usize {
        self.spec.stride
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.in_channels(), "conv-bn-silu")?;
        let y = conv2d(x, &self.weight, None, self.spec)?;
        let y = batch_norm(&y, &self.gamma, &self.beta, &self.bn, ctx.train)?;
        Ok(if self.act { y.silu() } else { y })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        Ok((self.spec.output_size(h, k)?, self.spec.output_size(w, k)?))
    }

    /// Multiply-accumulates for an `h`×`w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_hw(h, w).unwrap_or((0, 0));
        (self.weight.numel() * ho * wo) as u64
    }
}

impl Module for ConvBnAct {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((join(prefix, "conv.weight"), self.weight.clone()));
        out.push((join(prefix, "bn.gamma"), self.gamma.clone()));
        out.push((join(prefix, "bn.beta"), self.beta.clone()));
    }
}

pub struct Bottleneck {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
    pub residual: bool,
}

impl Bottleneck {
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x, ctx)?, ctx)?;
        if self.residual {
            x.add(&y)
        } else {
            Ok(y)
        }
    }
}

/// CSP-style stage block: a 1×1 projection to `2c` channels split into two
/// halves, `n` bottlenecks chained on the second half, every intermediate
/// concatenated and merged by a 1×1 projection to `cout`. `c = cout / 2`.
pub struct StageBlock {
    pub cv1: ConvBnAct,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBnAct,
    pub hidden: usize,
}

impl StageBlock {
    pub fn new(cin: usize, cout: usize, n: usize, shortcut: bool, rng: &mut impl Rng) -> StageBlock {
        let c = (cout / 2).max(1);
        let cv1 = ConvBnAct::new(cin, 2 * c, 1, 1, rng);
        let blocks = (0..n)
            .map(|_| Bottleneck {
                cv1: ConvBnAct::new(c, c, 3, 1, rng),
                cv2: ConvBnAct::new(c, c, 3, 1, rng),
                residual: shortcut,
            })
            .collect();
        let cv2 = ConvBnAct::new((2 + n) * c, cout, 1, 1, rng);
        StageBlock { cv1, blocks, cv2, hidden: c }
    }

    pub fn in_channels(&self) -> usize {
        self.cv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.in_channels(), "stage block")?;
        let y = self.cv1.forward(x, ctx)?;
        let halves = crate::tensor::split(&y, 1, &[self.hidden, self.hidden])?;
        let mut parts = halves.clone();
        let mut cur = halves[1].clone();
        for b in &self.blocks {
            cur = b.forward(&cur, ctx)?;
            parts.push(cur.clone());
        }
        self.cv2.forward(&concat(&parts, 1)?, ctx)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let inner: u64 = self.blocks.iter().map(|b| b.cv1.macs(h, w) + b.cv2.macs(h, w)).sum();
        self.cv1.macs(h, w) + inner + self.cv2.macs(h, w)
    }
}

impl Module for StageBlock {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.cv1.collect_params(&join(prefix, "cv1"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("m{i}"));
            b.cv1.collect_params(&join(&p, "cv1"), out);
            b.cv2.collect_params(&join(&p, "cv2"), out);
        }
        self.cv2.collect_params(&join(prefix, "cv2"), out);
    }
}

/// Spatial pyramid pooling (fast): 1×1 halving projection, three serial
/// 5×5 stride-1 max pools, concatenation of all four maps and a 1×1
/// projection back to `C`. The concatenation is traced as `sppf.concat`.
pub struct Sppf {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
}

impl Sppf {
    pub fn new(c: usize, rng: &mut impl Rng) -> Sppf {
        let h = (c / 2).max(1);
        Sppf { cv1: ConvBnAct::new(c, h, 1, 1, rng), cv2: ConvBnAct::new(4 * h, c, 1, 1, rng) }
    }

    pub fn channels(&self) -> usize {
        self.cv1.in_channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.channels(), "sppf")?;
        let a = self.cv1.forward(x, ctx)?;
        let p1 = a.maxpool2d(5, 1, 2)?;
        let p2 = p1.maxpool2d(5, 1, 2)?;
        let p3 = p2.maxpool2d(5, 1, 2)?;
        let cat = concat(&[a, p1, p2, p3], 1)?;
        ctx.record("sppf.concat", &cat);
        self.cv2.forward(&cat, ctx)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.cv1.macs(h, w) + self.cv2.macs(h, w)
    }
}

impl Module for Sppf {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.cv1.collect_params(&join(prefix, "cv1"), out);
        self.cv2.collect_params(&join(prefix, "cv2"), out);
    }
}

/// Prior probability used to initialize the classification bias.
pub const CLS_PRIOR: f64 = 0.01;

/// Decoupled head for one pyramid level: separate classification and box
/// branches, each a 3×3 conv-BN-SiLU followed by a 1×1 output conv.
pub struct DetectHead {
    pub cls_stem: ConvBnAct,
    pub cls_out: Conv,
    pub box_stem: ConvBnAct,
    pub box_out: Conv,
}

impl DetectHead {
    pub fn new(c: usize, num_classes: usize, rng: &mut impl Rng) -> DetectHead {
        let cls_out = Conv::new(c, num_classes, 1, 1, true, rng);
        if let Some(b) = &cls_out.bias {
            let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
            b.data_mut().fill(prior);
        }
        DetectHead {
            cls_stem: ConvBnAct::new(c, c, 3, 1, rng),
            cls_out,
            box_stem: ConvBnAct::new(c, c, 3, 1, rng),
            box_out: Conv::new(c, 4, 1, 1, true, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cls_stem.in_channels()
    }

    /// Returns `(class logits [B, nc, H, W], box deltas [B, 4, H, W])`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let cls = self.cls_out.forward(&self.cls_stem.forward(x, ctx)?)?;
        let reg = self.box_out.forward(&self.box_stem.forward(x, ctx)?)?;
        Ok((cls, reg))
    }

    pub fn num_classes(&self) -> usize {
        self.cls_out.out_channels()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = h * w;
        self.cls_stem.macs(h, w) + self.cls_out.macs(hw) + self.box_stem.macs(h, w) + self.box_out.macs(hw)
    }
}

impl Module for DetectHead {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.cls_stem.collect_params(&join(prefix, "cls_stem"), out);
        self.cls_out.collect_params(&join(prefix, "cls_out"), out);
        self.box_stem.collect_params(&join(prefix, "box_stem"), out);
        self.box_out.collect_params(&join(prefix, "box_out"), out);
    }
}
