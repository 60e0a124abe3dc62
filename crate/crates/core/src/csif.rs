//! Partial-channel global attention.
//!
//! [`Csif`] expands its input with a 1×1 stem, splits the result into two
//! equal channel halves, runs the first half through a stack of [`Csib`]
//! attention blocks and passes the second half through untouched, then
//! concatenates both and projects to the output width. Each [`Csib`] is
//! multi-head self-attention over spatial positions plus a per-position
//! feed-forward network, with an [`Asrm`] adapter after each residual join.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv, ConvBnAct, Ctx, Module, ParamList};
use crate::tensor::{concat, split, Tensor};

pub const ASRM_RANK: usize = 64;
pub const ASRM_DROPOUT: f64 = 0.05;
pub const ASRM_KERNELS: [usize; 3] = [3, 5, 7];
pub const LN_EPS: f64 = 1e-5;
pub const GAMMA_INIT: f64 = 0.01;
pub const GAMMA_X_INIT: f64 = 1.0;
pub const HEAD_WIDTH: usize = 64;
pub const STEM_EXPANSION: usize = 2;

/// Number of attention heads for a `channels`-wide block.
pub fn head_count(channels: usize) -> usize {
    (channels / HEAD_WIDTH).max(1)
}

/// Layer norm over the channel axis at every position, without affine terms.
pub fn channel_layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mu = x.mean_axis(1)?;
    let c = x.sub(&mu)?;
    let var = c.square().mean_axis(1)?;
    c.div(&var.add_scalar(eps).sqrt())
}

fn per_channel(t: &Tensor) -> Result<Tensor> {
    t.reshape(&[1, t.numel(), 1, 1])
}

/// Gated low-rank multi-scale adapter used as post-normalization.
pub struct Asrm {
    pub gamma: Tensor,
    pub gamma_x: Tensor,
    pub down: Conv,
    pub dw: Vec<Conv>,
    pub dw_bias: Tensor,
    pub up: Conv,
    pub p_drop: f64,
}

impl Asrm {
    /// Rank is `min(64, channels)`; the up-projection starts at zero so a
    /// fresh adapter is an exact identity.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Asrm {
        Asrm::with_rank(channels, ASRM_RANK.min(channels), rng)
    }

    pub fn with_rank(channels: usize, rank: usize, rng: &mut impl Rng) -> Asrm {
        let rank = rank.max(1);
        let down = Conv::new(channels, rank, 1, 1, true, rng);
        let dw = ASRM_KERNELS.iter().map(|&k| Conv::new(rank, rank, k, rank, false, rng)).collect();
        let dw_bias = crate::nn::init_uniform(&[rank], 9, rng);
        let up = Conv::new(rank, channels, 1, 1, true, rng);
        up.weight.data_mut().fill(0.0);
        up.bias.as_ref().expect("up-projection has a bias").data_mut().fill(0.0);
        Asrm {
            gamma: Tensor::full(&[channels], GAMMA_INIT).requires_grad(),
            gamma_x: Tensor::full(&[channels], GAMMA_X_INIT).requires_grad(),
            down,
            dw,
            dw_bias,
            up,
            p_drop: ASRM_DROPOUT,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn rank(&self) -> usize {
        self.down.out_channels()
    }

    /// Interpolation between the layer-normalized and the raw input.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.channels() {
            return shape_err(format!(
                "asrm expects [B, {}, H, W], got {:?}",
                self.channels(),
                x.shape()
            ));
        }
        let ln = channel_layer_norm(x, LN_EPS)?;
        per_channel(&self.gamma)?.mul(&ln)?.add(&per_channel(&self.gamma_x)?.mul(x)?)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let gated = self.gate(x)?;
        let d = self.down.forward(&gated)?;
        let mut s = self.dw[0].forward(&d)?;
        for conv in &self.dw[1..] {
            s = s.add(&conv.forward(&d)?)?;
        }
        let s = s.add(&per_channel(&self.dw_bias)?)?;
        let a = ctx.dropout(&s.gelu(), self.p_drop)?;
        x.add(&self.up.forward(&a)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = h * w;
        self.down.macs(hw) + self.dw.iter().map(|c| c.macs(hw)).sum::<u64>() + self.up.macs(hw)
    }
}

impl Module for Asrm {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "gamma_x"), self.gamma_x.clone()));
        self.down.collect_params(&join(prefix, "down"), out);
        for (conv, k) in self.dw.iter().zip(ASRM_KERNELS) {
            conv.collect_params(&join(prefix, &format!("dw{k}")), out);
        }
        out.push((join(prefix, "dw_bias"), self.dw_bias.clone()));
        self.up.collect_params(&join(prefix, "up"), out);
    }
}

/// Multi-head self-attention over the `H·W` positions of a feature map.
/// Projections are bias-free 1×1 kernels; the softmax weights of every head
/// are traced as `attn.weights` with shape `[B·h, T, T]`.
pub struct Mhsa {
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub wo: Conv,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Mhsa> {
        let heads = head_count(channels);
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split evenly over {heads} heads"
            )));
        }
        Ok(Mhsa {
            wq: Conv::new(channels, channels, 1, 1, false, rng),
            wk: Conv::new(channels, channels, 1, 1, false, rng),
            wv: Conv::new(channels, channels, 1, 1, false, rng),
            wo: Conv::new(channels, channels, 1, 1, false, rng),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.in_channels()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = self.channels();
        if x.rank() != 4 || x.dim(1) != c {
            return shape_err(format!("attention expects [B, {c}, H, W], got {:?}", x.shape()));
        }
        let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let t = h * w;
        let dk = self.head_dim();
        let split_heads = |y: Tensor| y.reshape(&[b * self.heads, dk, t]);
        let q = split_heads(self.wq.forward(x)?)?;
        let k = split_heads(self.wk.forward(x)?)?;
        let v = split_heads(self.wv.forward(x)?)?;
        let scores = q.transpose_last2()?.matmul(&k)?.mul_scalar(1.0 / (dk as f64).sqrt());
        let attn = scores.softmax(2)?;
        ctx.record("attn.weights", &attn);
        // out[:, :, i] = sum_j attn[i, j] v[:, j]
        let out = v.matmul(&attn.transpose_last2()?)?.reshape(&[b, c, h, w])?;
        self.wo.forward(&out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (c, t) = (self.channels() as u64, (h * w) as u64);
        4 * c * c * t + 2 * t * t * c
    }
}

impl Module for Mhsa {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.wq.collect_params(&join(prefix, "q"), out);
        self.wk.collect_params(&join(prefix, "k"), out);
        self.wv.collect_params(&join(prefix, "v"), out);
        self.wo.collect_params(&join(prefix, "o"), out);
    }
}

/// Attention, residual, adapter, feed-forward, residual, adapter.
pub struct Csib {
    pub attn: Mhsa,
    pub norm1: Asrm,
    pub ffn1: Conv,
    pub ffn2: Conv,
    pub norm2: Asrm,
}

impl Csib {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Csib> {
        Ok(Csib {
            attn: Mhsa::new(channels, rng)?,
            norm1: Asrm::new(channels, rng),
            ffn1: Conv::new(channels, 2 * channels, 1, 1, true, rng),
            ffn2: Conv::new(2 * channels, channels, 1, 1, true, rng),
            norm2: Asrm::new(channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.attn.channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let u = x.add(&self.attn.forward(x, ctx)?)?;
        let u_hat = self.norm1.forward(&u, ctx)?;
        let f = self.ffn2.forward(&self.ffn1.forward(&u_hat)?.silu())?;
        self.norm2.forward(&u_hat.add(&f)?, ctx)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = h * w;
        self.attn.macs(h, w)
            + self.norm1.macs(h, w)
            + self.ffn1.macs(hw)
            + self.ffn2.macs(hw)
            + self.norm2.macs(h, w)
    }
}

impl Module for Csib {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.ffn1.collect_params(&join(prefix, "ffn1"), out);
        self.ffn2.collect_params(&join(prefix, "ffn2"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
    }
}

/// Stem, split, attention on one half, bypass on the other, merge.
/// Traces `csif.stem` and `csif.concat`.
pub struct Csif {
    pub stem: ConvBnAct,
    pub blocks: Vec<Csib>,
    pub proj: ConvBnAct,
}

impl Csif {
    pub fn new(cin: usize, cout: usize, n: usize, rng: &mut impl Rng) -> Result<Csif> {
        let expanded = STEM_EXPANSION * cin;
        if !expanded.is_multiple_of(2) || cin == 0 {
            return Err(Error::Config(format!("stem width {expanded} cannot be halved")));
        }
        if n == 0 {
            return Err(Error::Config("csif needs at least one attention block".into()));
        }
        let half = expanded / 2;
        let stem = ConvBnAct::new(cin, expanded, 1, 1, rng);
        let blocks = (0..n).map(|_| Csib::new(half, rng)).collect::<Result<Vec<_>>>()?;
        let proj = ConvBnAct::new(expanded, cout, 1, 1, rng);
        Ok(Csif { stem, blocks, proj })
    }

    pub fn in_channels(&self) -> usize {
        self.stem.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    pub fn half(&self) -> usize {
        self.stem.out_channels() / 2
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let stem = self.stem.forward(x, ctx)?;
        ctx.record("csif.stem", &stem);
        let half = self.half();
        let parts = split(&stem, 1, &[half, half])?;
        let mut attended = parts[0].clone();
        for b in &self.blocks {
            attended = b.forward(&attended, ctx)?;
        }
        let cat = concat(&[attended, parts[1].clone()], 1)?;
        ctx.record("csif.concat", &cat);
        self.proj.forward(&cat, ctx)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let stem = self.stem.weight.numel() as u64 * hw;
        let proj = self.proj.weight.numel() as u64 * hw;
        stem + proj + self.blocks.iter().map(|b| b.macs(h, w)).sum::<u64>()
    }
}

impl Module for Csif {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.stem.collect_params(&join(prefix, "stem"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("csib{i}")), out);
        }
        self.proj.collect_params(&join(prefix, "proj"), out);
    }
}
