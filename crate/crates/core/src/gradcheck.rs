//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so that entries
    /// whose true gradient is zero are judged by absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords: Option<usize>,
    /// Seed for the coordinate subset.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward-pass gradient of `loss` with respect to every
/// tensor in `params` against central differences of `loss` itself.
///
/// `loss` must be a deterministic function of the current parameter values.
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::with_capacity(params.len());
    for ((name, p), grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut report = GroupReport {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &i in &coords {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + opts.step;
            let plus = no_grad(&loss)?.item();
            p.data_mut()[i] = orig - opts.step;
            let minus = no_grad(&loss)?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(grad[i], numeric, opts.floor);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.max_abs_err = report.max_abs_err.max((grad[i] - numeric).abs());
        }
        groups.push(report);
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(GradCheckReport { groups })
}

/// Scalar probe `sum(y ⊙ w) / sqrt(numel)` with fixed standard-normal
/// weights `w`, so every output element contributes a distinct gradient.
pub fn random_projection(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(y.shape(), 1.0, &mut rng);
    Ok(y.mul(&w)?.sum().mul_scalar(1.0 / (y.numel() as f64).sqrt()))
}
