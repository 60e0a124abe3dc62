//! Anchor-free detection: target assignment, classification/CIoU losses,
//! SGD training steps, decoding with per-class NMS, and prediction dumps.

mod assign;
mod ciou;
mod decode;
mod loss;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamList};
use crate::tensor::Tensor;
use crate::topology::ModelGraph;

pub use assign::{assign_targets, level_for, AssignConfig, GridSpec, Positive};
pub use ciou::{ciou, ciou_corners, Dual4, Real, GUARD};
pub use decode::{
    decode, decode_and_nms, nms, read_predictions, write_predictions, PredictionRecord,
    PRE_NMS_TOP_K,
};
pub use loss::{box_loss, decode_cell, detection_loss, grid_of, LossConfig, LossParts};

/// Ground-truth object; `class` is the model's 0-based class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

/// A training or evaluation batch: `[B, 3, H, W]` RGB, `[B, 1, H, W]`
/// depth, and the objects of each image.
pub struct Batch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub targets: Vec<Vec<GroundTruth>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 0.01, momentum: 0.937, grad_clip: 10.0 }
    }
}

/// Heavy-ball SGD: `v = momentum * v + g`, `p -= lr * v`.
pub struct Sgd {
    pub config: OptimConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: OptimConfig, params: &ParamList) -> Sgd {
        Sgd { config, velocity: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect() }
    }

    /// Applies the accumulated gradients and clears them. Returns the global
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &ParamList) -> f64 {
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        for (((_, p), g), v) in params.iter().zip(&grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let mut data = p.data_mut();
            for ((x, gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.config.momentum * *vi + gi * scale;
                *x -= self.config.lr * *vi;
            }
            drop(data);
            p.zero_grad();
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
    pub positives: usize,
    pub grad_norm: f64,
}

/// One forward/backward/update cycle. A non-finite loss aborts before any
/// weight is touched.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &ModelGraph,
    params: &ParamList,
    opt: &mut Sgd,
    batch: &Batch,
    loss_cfg: &LossConfig,
    assign: &AssignConfig,
    step: usize,
    ctx: &Ctx,
) -> Result<StepReport> {
    let outputs = model.forward(&batch.rgb, &batch.depth, ctx)?;
    let parts = detection_loss(&outputs, &batch.targets, assign, loss_cfg)?;
    let total = parts.total.item();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("cls {} box {} positives {}", parts.cls, parts.boxes, parts.positives),
        });
    }
    parts.total.backward()?;
    let grad_norm = opt.step(params);
    Ok(StepReport {
        step,
        total,
        cls: parts.cls,
        boxes: parts.boxes,
        positives: parts.positives,
        grad_norm,
    })
}
