use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::bbox::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    /// Objects whose longer side is below `size_bounds[0]` pixels go to P3,
    /// below `size_bounds[1]` to P4, the rest to P5.
    pub size_bounds: [f64; 2],
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { size_bounds: [64.0, 128.0] }
    }
}

/// Stride and `(rows, cols)` of each detection level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub strides: [usize; 3],
    pub sizes: [(usize, usize); 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub image: usize,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub class: usize,
    pub bbox: BBox,
}

pub fn level_for(bbox: &BBox, cfg: &AssignConfig) -> usize {
    let size = bbox.w.max(bbox.h);
    if size < cfg.size_bounds[0] {
        0
    } else if size < cfg.size_bounds[1] {
        1
    } else {
        2
    }
}

/// One positive cell per ground truth at most: the cell containing its
/// center on the level chosen by its size. When several ground truths claim
/// the same cell the one with the smallest area keeps it. Output is ordered
/// by image, level, row, column.
pub fn assign_targets(gts: &[Vec<GroundTruth>], grid: &GridSpec, cfg: &AssignConfig) -> Vec<Positive> {
    let mut out = Vec::new();
    for (image, list) in gts.iter().enumerate() {
        let mut cells: BTreeMap<(usize, usize, usize), &GroundTruth> = BTreeMap::new();
        for gt in list {
            let level = level_for(&gt.bbox, cfg);
            let s = grid.strides[level] as f64;
            let (rows, cols) = grid.sizes[level];
            let (cx, cy) = gt.bbox.center();
            let col = ((cx / s).floor().max(0.0) as usize).min(cols - 1);
            let row = ((cy / s).floor().max(0.0) as usize).min(rows - 1);
            cells
                .entry((level, row, col))
                .and_modify(|cur| {
                    if gt.bbox.area() < cur.bbox.area() {
                        *cur = gt;
                    }
                })
                .or_insert(gt);
        }
        out.extend(cells.into_iter().map(|((level, row, col), gt)| Positive {
            image,
            level,
            row,
            col,
            class: gt.class,
            bbox: gt.bbox,
        }));
    }
    out
}
