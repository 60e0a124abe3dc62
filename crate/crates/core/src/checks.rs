//! Finite-difference suites for each trainable module and for the whole
//! micro detector.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::csif::{Asrm, Csib, Csif};
use crate::detect::{detection_loss, AssignConfig, GroundTruth, LossConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, random_projection, GradCheckOptions, GradCheckReport};
use crate::nn::{Ctx, Module, ParamList};
use crate::srm::Srm;
use crate::tensor::Tensor;
use crate::topology::{ModelConfig, ModelGraph, ScaleConfig};

/// Tolerance for single modules.
pub const MODULE_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end detector.
pub const FULL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Srm,
    Asrm,
    Csib,
    Csif,
    Full,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Srm, Suite::Asrm, Suite::Csib, Suite::Csif, Suite::Full];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Srm => "srm",
            Suite::Asrm => "asrm",
            Suite::Csib => "csib",
            Suite::Csif => "csif",
            Suite::Full => "full",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Full => FULL_TOLERANCE,
            _ => MODULE_TOLERANCE,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module '{s}' (srm|asrm|csib|csif|full)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub tolerance: f64,
    pub passed: bool,
    pub report: GradCheckReport,
}

/// Moves every parameter away from its initial value so that zero-initialized
/// projections and near-identity gates carry gradient through all paths.
fn perturb(params: &ParamList, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, p) in params {
        for v in p.data_mut().iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).requires_grad()
}

fn with_input(mut params: ParamList, x: &Tensor) -> ParamList {
    params.push(("input".to_string(), x.clone()));
    params
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { seed, ..Default::default() };
    let probe = seed.wrapping_add(1);
    let report = match suite {
        Suite::Srm => {
            let m = Srm::new(8, &mut rng);
            let x = input(&[1, 8, 4, 4], &mut rng);
            check_gradients(&with_input(m.parameters(), &x), || random_projection(&m.forward(&x)?, probe), opts)?
        }
        Suite::Asrm => {
            let m = Asrm::new(8, &mut rng);
            perturb(&m.parameters(), 0.5, &mut rng);
            let x = input(&[1, 8, 4, 4], &mut rng);
            let ctx = Ctx::eval();
            check_gradients(&with_input(m.parameters(), &x), || random_projection(&m.forward(&x, &ctx)?, probe), opts)?
        }
        Suite::Csib => {
            let m = Csib::new(64, &mut rng)?;
            perturb(&m.parameters(), 0.1, &mut rng);
            let x = input(&[1, 64, 3, 3], &mut rng);
            let ctx = Ctx::eval();
            let opts = GradCheckOptions { max_coords: Some(24), ..opts };
            check_gradients(&with_input(m.parameters(), &x), || random_projection(&m.forward(&x, &ctx)?, probe), opts)?
        }
        Suite::Csif => {
            let m = Csif::new(16, 16, 1, &mut rng)?;
            perturb(&m.parameters(), 0.1, &mut rng);
            let x = input(&[1, 16, 3, 3], &mut rng);
            let ctx = Ctx::eval();
            let opts = GradCheckOptions { max_coords: Some(24), ..opts };
            check_gradients(&with_input(m.parameters(), &x), || random_projection(&m.forward(&x, &ctx)?, probe), opts)?
        }
        Suite::Full => full_suite(seed, &mut rng)?,
    };
    let tolerance = suite.tolerance();
    Ok(SuiteReport { suite, tolerance, passed: report.passes(tolerance), report })
}

/// Detection loss of the micro model on a 64x64 pair, train-mode batch
/// statistics, every parameter tensor checked on a few coordinates.
fn full_suite(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = ModelConfig { scale: ScaleConfig::micro(), ..ModelConfig::default() };
    let model = ModelGraph::build(&cfg, seed)?;
    let params = model.parameters();
    perturb(&params, 0.02, rng);
    let rgb = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, rng);
    let depth = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, rng);
    let targets = vec![
        vec![
            GroundTruth { bbox: BBox::new(10.0, 12.0, 14.0, 9.0), class: 0 },
            GroundTruth { bbox: BBox::new(36.0, 30.0, 20.0, 22.0), class: 1 },
        ],
        vec![GroundTruth { bbox: BBox::new(20.0, 40.0, 11.0, 13.0), class: 1 }],
    ];
    let loss = || {
        // fresh context per call keeps dropout masks identical across calls
        let ctx = Ctx::train(seed);
        let out = model.forward(&rgb, &depth, &ctx)?;
        Ok(detection_loss(&out, &targets, &AssignConfig::default(), &LossConfig::default())?.total)
    };
    let opts = GradCheckOptions { max_coords: Some(2), seed, ..Default::default() };
    check_gradients(&params, loss, opts)
}
