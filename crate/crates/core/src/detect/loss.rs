use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, AssignConfig, GridSpec, Positive};
use super::ciou::{ciou_corners, Dual4};
use super::GroundTruth;
use crate::bbox::BBox;
use crate::error::{shape_err, Result};
use crate::tensor::{sigmoid_f, softplus_f, Tensor};
use crate::topology::LevelOutput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { cls_weight: 0.5, box_weight: 7.5 }
    }
}

/// Box predicted at cell `(row, col)` of a level with the given stride from
/// raw regressions `(l, t, r, b)`: softplus distances in stride units from
/// the cell center.
pub fn decode_cell(deltas: [f64; 4], row: usize, col: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
    let [l, t, r, b] = deltas.map(|d| softplus_f(d) * s);
    BBox::from_corners(cx - l, cy - t, cx + r, cy + b)
}

pub fn grid_of(outputs: &[LevelOutput]) -> Result<GridSpec> {
    if outputs.len() != 3 {
        return shape_err(format!("expected 3 detection levels, got {}", outputs.len()));
    }
    Ok(GridSpec {
        strides: [outputs[0].stride, outputs[1].stride, outputs[2].stride],
        sizes: std::array::from_fn(|i| (outputs[i].cls.dim(2), outputs[i].cls.dim(3))),
    })
}

/// `sum(1 - CIoU)` over the positives of one level, differentiable in the
/// raw box regressions `[B, 4, H, W]`.
pub fn box_loss(boxes: &Tensor, stride: usize, positives: &[Positive]) -> Result<Tensor> {
    boxes.expect_rank(4, "box regressions")?;
    let (h, w) = (boxes.dim(2), boxes.dim(3));
    let hw = h * w;
    let s = stride as f64;
    let mut total = 0.0;
    let mut partials = Vec::with_capacity(positives.len());
    {
        let d = boxes.data();
        for p in positives {
            let base = p.image * 4 * hw + p.row * w + p.col;
            let raw: [f64; 4] = std::array::from_fn(|k| d[base + k * hw]);
            let (cx, cy) = ((p.col as f64 + 0.5) * s, (p.row as f64 + 0.5) * s);
            let [l, t, r, b] = raw.map(|v| softplus_f(v) * s);
            let pred = [
                Dual4::var(cx - l, 0, -1.0),
                Dual4::var(cy - t, 1, -1.0),
                Dual4::var(cx + r, 2, 1.0),
                Dual4::var(cy + b, 3, 1.0),
            ];
            let c = ciou_corners(pred, p.bbox.corners().map(|v| Dual4 { v, d: [0.0; 4] }));
            total += 1.0 - c.v;
            // d(1 - c)/d raw_k = -dc/d dist_k * stride * sigmoid(raw_k)
            let g: [f64; 4] = std::array::from_fn(|k| -c.d[k] * s * sigmoid_f(raw[k]));
            partials.push((base, g));
        }
    }
    let n = boxes.numel();
    Ok(Tensor::from_op(
        vec![total],
        vec![1],
        "box_ciou_loss",
        vec![boxes.clone()],
        Box::new(move |gout, _, _, _| {
            let mut gx = vec![0.0; n];
            for (base, g) in &partials {
                for k in 0..4 {
                    gx[base + k * hw] += gout[0] * g[k];
                }
            }
            vec![Some(gx)]
        }),
    ))
}

pub struct LossParts {
    pub total: Tensor,
    pub cls: f64,
    pub boxes: f64,
    pub positives: usize,
}

/// `cls_weight * BCE / max(1, P) + box_weight * sum(1 - CIoU) / max(1, P)`
/// where BCE sums over every cell and class and `P` counts positive cells.
pub fn detection_loss(
    outputs: &[LevelOutput],
    gts: &[Vec<GroundTruth>],
    assign: &AssignConfig,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let grid = grid_of(outputs)?;
    let positives = assign_targets(gts, &grid, assign);
    let norm = 1.0 / positives.len().max(1) as f64;

    let mut cls_terms = Vec::with_capacity(3);
    let mut box_terms = Vec::with_capacity(3);
    for (level, out) in outputs.iter().enumerate() {
        let (b, nc, h, w) = (out.cls.dim(0), out.cls.dim(1), out.cls.dim(2), out.cls.dim(3));
        if b != gts.len() {
            return shape_err(format!("batch of {b} predictions for {} target lists", gts.len()));
        }
        let mut targets = vec![0.0; b * nc * h * w];
        let here: Vec<Positive> = positives.iter().filter(|p| p.level == level).copied().collect();
        for p in &here {
            if p.class >= nc {
                return shape_err(format!("class {} outside {nc} model classes", p.class));
            }
            targets[((p.image * nc + p.class) * h + p.row) * w + p.col] = 1.0;
        }
        cls_terms.push(out.cls.bce_with_logits_sum(&targets)?);
        if !here.is_empty() {
            box_terms.push(box_loss(&out.boxes, out.stride, &here)?);
        }
    }
    let mut cls = cls_terms[0].clone();
    for t in &cls_terms[1..] {
        cls = cls.add(t)?;
    }
    let cls = cls.mul_scalar(norm);
    let cls_value = cls.item();
    let mut total = cls.mul_scalar(cfg.cls_weight);
    let mut box_value = 0.0;
    if !box_terms.is_empty() {
        let mut bx = box_terms[0].clone();
        for t in &box_terms[1..] {
            bx = bx.add(t)?;
        }
        let bx = bx.mul_scalar(norm);
        box_value = bx.item();
        total = total.add(&bx.mul_scalar(cfg.box_weight))?;
    }
    Ok(LossParts { total, cls: cls_value, boxes: box_value, positives: positives.len() })
}
