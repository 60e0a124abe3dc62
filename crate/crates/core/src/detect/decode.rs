use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::loss::decode_cell;
use super::Detection;
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::sigmoid_f;
use crate::topology::LevelOutput;

/// Candidates kept per image before suppression.
pub const PRE_NMS_TOP_K: usize = 3000;

/// Every (cell, class) whose score reaches `conf_thresh`, per image, with
/// boxes clipped to the input frame.
pub fn decode(outputs: &[LevelOutput], conf_thresh: f64) -> Vec<Vec<Detection>> {
    let batch = outputs.first().map(|o| o.cls.dim(0)).unwrap_or(0);
    let (img_h, img_w) = outputs
        .first()
        .map(|o| ((o.cls.dim(2) * o.stride) as f64, (o.cls.dim(3) * o.stride) as f64))
        .unwrap_or((0.0, 0.0));
    let mut per_image = vec![Vec::new(); batch];
    for out in outputs {
        let (nc, h, w) = (out.cls.dim(1), out.cls.dim(2), out.cls.dim(3));
        let hw = h * w;
        let cls = out.cls.data();
        let reg = out.boxes.data();
        for (b, dets) in per_image.iter_mut().enumerate() {
            for row in 0..h {
                for col in 0..w {
                    let cell = row * w + col;
                    let mut bbox = None;
                    for class in 0..nc {
                        let score = sigmoid_f(cls[(b * nc + class) * hw + cell]);
                        if score < conf_thresh {
                            continue;
                        }
                        let bb = *bbox.get_or_insert_with(|| {
                            let d = std::array::from_fn(|k| reg[(b * 4 + k) * hw + cell]);
                            clip(decode_cell(d, row, col, out.stride), img_w, img_h)
                        });
                        dets.push(Detection { bbox: bb, score, class });
                    }
                }
            }
        }
    }
    per_image
}

fn clip(b: BBox, w: f64, h: f64) -> BBox {
    let [x1, y1, x2, y2] = b.corners();
    BBox::from_corners(x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h))
}

/// Per-class greedy suppression: visit by descending score (stable among
/// equal scores) and keep a box unless it overlaps an already kept box of
/// the same class by more than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64, max_det: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order.truncate(PRE_NMS_TOP_K);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
            if kept.len() == max_det {
                break;
            }
        }
    }
    kept
}

pub fn decode_and_nms(
    outputs: &[LevelOutput],
    conf_thresh: f64,
    iou_thresh: f64,
    max_det: usize,
) -> Vec<Vec<Detection>> {
    decode(outputs, conf_thresh)
        .into_iter()
        .map(|d| nms(&d, iou_thresh, max_det))
        .collect()
}

/// One line of a prediction dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl PredictionRecord {
    /// Model class `k` is reported as category id `k + 1`.
    pub fn from_detection(image_id: u64, d: &Detection) -> PredictionRecord {
        PredictionRecord {
            image_id,
            category_id: d.class as u32 + 1,
            bbox: d.bbox.to_array(),
            score: d.score,
        }
    }
}

pub fn write_predictions(mut w: impl Write, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("prediction line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
