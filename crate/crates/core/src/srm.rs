//! Semantic recomposition: pointwise encode to `K` latent channels, linear
//! 5×5 depthwise refinement, position-wise normalization over the latent
//! channels, pointwise decode, and a fixed convex mix with the input.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv, Module, ParamList};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const REFINE_KERNEL: usize = 5;

/// Latent width for an input of `channels` channels: half, rounded up.
pub fn latent_channels(channels: usize) -> usize {
    channels.div_ceil(2)
}

/// Closed-form trainable parameter count of an SRM with `c` input and `k`
/// latent channels.
pub fn analytic_params(c: usize, k: usize) -> usize {
    (c * k + k) + (REFINE_KERNEL * REFINE_KERNEL * k + k) + (k * c + c)
}

/// Standardizes every spatial position of `[B, K, H, W]` over its `K`
/// channel values using the biased variance.
pub fn pono(r: &Tensor, eps: f64) -> Result<Tensor> {
    r.expect_rank(4, "pono")?;
    let mu = r.mean_axis(1)?;
    let centered = r.sub(&mu)?;
    let var = centered.square().mean_axis(1)?;
    centered.div(&var.add_scalar(eps).sqrt())
}

pub struct Srm {
    pub enc: Conv,
    pub dw: Conv,
    pub dec: Conv,
    pub alpha: f64,
    pub eps: f64,
}

impl Srm {
    /// An SRM with the default latent width, mixing weight and epsilon.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Srm {
        Srm::with_config(channels, latent_channels(channels), DEFAULT_ALPHA, DEFAULT_EPS, rng)
            .expect("default configuration is valid")
    }

    pub fn with_config(
        channels: usize,
        latent: usize,
        alpha: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Srm> {
        if channels == 0 || latent == 0 {
            return Err(Error::Config("srm needs at least one input and latent channel".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("srm alpha {alpha} outside [0, 1]")));
        }
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Config(format!("srm epsilon {eps} must be positive")));
        }
        Ok(Srm {
            enc: Conv::new(channels, latent, 1, 1, true, rng),
            dw: Conv::new(latent, latent, REFINE_KERNEL, latent, true, rng),
            dec: Conv::new(latent, channels, 1, 1, true, rng),
            alpha,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.enc.in_channels()
    }

    pub fn latent(&self) -> usize {
        self.enc.out_channels()
    }

    /// Encode followed by the depthwise refinement; affine in the input.
    pub fn refine(&self, f: &Tensor) -> Result<Tensor> {
        if f.rank() != 4 || f.dim(1) != self.channels() {
            return shape_err(format!(
                "srm expects [B, {}, H, W], got {:?}",
                self.channels(),
                f.shape()
            ));
        }
        self.dw.forward(&self.enc.forward(f)?)
    }

    /// The decoded branch before mixing.
    pub fn decoded(&self, f: &Tensor) -> Result<Tensor> {
        self.dec.forward(&pono(&self.refine(f)?, self.eps)?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let d = self.decoded(f)?;
        d.mul_scalar(self.alpha).add(&f.mul_scalar(1.0 - self.alpha))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = h * w;
        self.enc.macs(hw) + self.dw.macs(hw) + self.dec.macs(hw)
    }
}

impl Module for Srm {
    fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.enc.collect_params(&join(prefix, "enc"), out);
        self.dw.collect_params(&join(prefix, "dw"), out);
        self.dec.collect_params(&join(prefix, "dec"), out);
    }
}
