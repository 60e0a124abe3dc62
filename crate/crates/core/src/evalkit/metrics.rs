use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::stats::{dataset_stats, SizeBucket, SizeHistogram};
use super::{Corpus, REFERENCE_SIZE};
use crate::bbox::{iou, BBox};
use crate::detect::PredictionRecord;
use crate::error::{Error, Result};

pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    /// Detections kept per image and category, highest scores first.
    pub max_dets: usize,
    /// Side of the square frame annotations are rescaled to for bucketing.
    pub target_size: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_dets: 100,
            target_size: REFERENCE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Prediction indices by descending score (stable for equal scores).
    pub order: Vec<usize>,
    /// Whether the prediction at each position of `order` is a true positive.
    pub tp: Vec<bool>,
    /// Matched ground-truth index at each position of `order`.
    pub matched: Vec<Option<usize>>,
    pub false_negatives: usize,
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Core greedy matcher over predictions already in score order. Ground
/// truths flagged as ignored are only used once no regular ground truth
/// qualifies; among equal overlaps the later ground truth wins.
fn greedy(
    preds: &[BBox],
    gts: &[BBox],
    gt_ignored: &[bool],
    thresh: f64,
) -> Vec<Option<usize>> {
    // regular ground truths first, original order otherwise
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| gt_ignored[g]);
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best = thresh.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for &g in &gt_order {
                if taken[g] {
                    continue;
                }
                if let Some(cur) = m {
                    if !gt_ignored[cur] && gt_ignored[g] {
                        break;
                    }
                }
                let o = iou(p, &gts[g]);
                if o < best {
                    continue;
                }
                best = o;
                m = Some(g);
            }
            if let Some(g) = m {
                taken[g] = true;
            }
            m
        })
        .collect()
}

/// Greedy score-ordered matching of one image and category: each prediction
/// takes the unmatched ground truth of highest IoU at or above `thresh`.
pub fn match_detections(preds: &[(BBox, f64)], gts: &[BBox], thresh: f64) -> MatchResult {
    let scores: Vec<f64> = preds.iter().map(|p| p.1).collect();
    let order = score_order(&scores);
    let sorted: Vec<BBox> = order.iter().map(|&i| preds[i].0).collect();
    let matched = greedy(&sorted, gts, &vec![false; gts.len()], thresh);
    let tp: Vec<bool> = matched.iter().map(Option::is_some).collect();
    let hits = tp.iter().filter(|&&t| t).count();
    MatchResult { order, tp, matched, false_negatives: gts.len() - hits }
}

/// `(recall, precision)` after each prediction of a score-ordered TP/FP
/// stream.
pub fn precision_envelope_points(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let (mut t, mut f) = (0usize, 0usize);
    tp.iter()
        .map(|&hit| {
            if hit {
                t += 1;
            } else {
                f += 1;
            }
            (t as f64 / num_gt as f64, t as f64 / (t + f) as f64)
        })
        .collect()
}

/// 101-point interpolated average precision of a score-ordered TP/FP
/// stream. `None` when there is neither a ground truth nor a prediction;
/// zero when predictions exist without ground truth.
pub fn average_precision(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if tp.is_empty() { None } else { Some(0.0) };
    }
    let pts = precision_envelope_points(tp, num_gt);
    let mut env: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    let mut i = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while i < pts.len() && pts[i].0 < r {
            i += 1;
        }
        if i == pts.len() {
            break;
        }
        total += env[i];
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub id: u32,
    pub name: String,
    pub num_gt: usize,
    /// AP at each IoU threshold (all sizes).
    pub ap: Vec<Option<f64>>,
    pub recall50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub categories: Vec<CategoryReport>,
    pub sizes: SizeHistogram,
    pub num_images: usize,
    pub num_predictions: usize,
}

struct Stream {
    entries: Vec<(f64, bool)>,
    num_gt: usize,
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Full evaluation of `preds` against `corpus`.
pub fn coco_summary(corpus: &Corpus, preds: &[PredictionRecord], params: &EvalParams) -> Result<EvalReport> {
    let mut images: Vec<_> = corpus.images.iter().collect();
    images.sort_by_key(|i| i.id);
    let scale: HashMap<u64, f64> = images
        .iter()
        .map(|i| (i.id, (params.target_size / i.width as f64) * (params.target_size / i.height as f64)))
        .collect();
    let known_cat = |c: u32| corpus.categories.iter().any(|k| k.id == c);

    let mut gt_map: HashMap<(u64, u32), Vec<BBox>> = HashMap::new();
    for a in &corpus.annotations {
        if !known_cat(a.category_id) {
            return Err(Error::UnknownCategory(a.category_id));
        }
        if !scale.contains_key(&a.image_id) {
            return Err(Error::Parse(format!("annotation {} refers to unknown image {}", a.id, a.image_id)));
        }
        gt_map.entry((a.image_id, a.category_id)).or_default().push(a.bbox());
    }
    let mut dt_map: HashMap<(u64, u32), Vec<(BBox, f64)>> = HashMap::new();
    for p in preds {
        if !known_cat(p.category_id) {
            return Err(Error::UnknownCategory(p.category_id));
        }
        if !scale.contains_key(&p.image_id) {
            return Err(Error::Parse(format!("prediction refers to unknown image {}", p.image_id)));
        }
        dt_map.entry((p.image_id, p.category_id)).or_default().push((BBox::from_array(p.bbox), p.score));
    }
    // highest-scoring detections per image and category
    for dts in dt_map.values_mut() {
        let scores: Vec<f64> = dts.iter().map(|d| d.1).collect();
        let order = score_order(&scores);
        *dts = order.into_iter().take(params.max_dets).map(|i| dts[i]).collect();
    }

    let nt = params.iou_thresholds.len();
    let ranges: [Option<SizeBucket>; 4] =
        [None, Some(SizeBucket::Small), Some(SizeBucket::Medium), Some(SizeBucket::Large)];
    // ap[range][category][threshold]
    let mut ap = vec![vec![vec![None; nt]; corpus.categories.len()]; ranges.len()];
    let (mut tp50, mut fp50, mut gt_all) = (0usize, 0usize, 0usize);
    let mut recall50 = vec![None; corpus.categories.len()];
    let mut num_gt = vec![0usize; corpus.categories.len()];

    for (ri, range) in ranges.iter().enumerate() {
        for (ki, cat) in corpus.categories.iter().enumerate() {
            for (ti, &thresh) in params.iou_thresholds.iter().enumerate() {
                let mut stream = Stream { entries: Vec::new(), num_gt: 0 };
                for img in &images {
                    let s = scale[&img.id];
                    let empty_g = Vec::new();
                    let empty_d = Vec::new();
                    let gts = gt_map.get(&(img.id, cat.id)).unwrap_or(&empty_g);
                    let dts = dt_map.get(&(img.id, cat.id)).unwrap_or(&empty_d);
                    let outside = |b: &BBox| range.is_some_and(|r| !r.contains(b.area() * s));
                    let gt_ignored: Vec<bool> = gts.iter().map(outside).collect();
                    let boxes: Vec<BBox> = dts.iter().map(|d| d.0).collect();
                    let matched = greedy(&boxes, gts, &gt_ignored, thresh);
                    stream.num_gt += gt_ignored.iter().filter(|&&i| !i).count();
                    for ((d, m), b) in dts.iter().zip(&matched).zip(&boxes) {
                        let ignored = match m {
                            Some(g) => gt_ignored[*g],
                            None => outside(b),
                        };
                        if !ignored {
                            stream.entries.push((d.1, m.is_some()));
                        }
                    }
                }
                // stable merge across images in id order
                let scores: Vec<f64> = stream.entries.iter().map(|e| e.0).collect();
                let tp: Vec<bool> = score_order(&scores).into_iter().map(|i| stream.entries[i].1).collect();
                ap[ri][ki][ti] = average_precision(&tp, stream.num_gt);
                if ri == 0 && ti == 0 {
                    let hits = tp.iter().filter(|&&t| t).count();
                    tp50 += hits;
                    fp50 += tp.len() - hits;
                    gt_all += stream.num_gt;
                    num_gt[ki] = stream.num_gt;
                    recall50[ki] = (stream.num_gt > 0).then(|| hits as f64 / stream.num_gt as f64);
                }
            }
        }
    }

    let all_thresholds = |ri: usize| mean(ap[ri].iter().flatten().flatten().copied());
    let at = |ti: usize| mean(ap[0].iter().filter_map(|c| c[ti]));
    let categories = corpus
        .categories
        .iter()
        .enumerate()
        .map(|(ki, c)| CategoryReport {
            id: c.id,
            name: c.name.clone(),
            num_gt: num_gt[ki],
            ap: ap[0][ki].clone(),
            recall50: recall50[ki],
        })
        .collect();
    Ok(EvalReport {
        precision: if tp50 + fp50 == 0 { 0.0 } else { tp50 as f64 / (tp50 + fp50) as f64 },
        recall: if gt_all == 0 { 0.0 } else { tp50 as f64 / gt_all as f64 },
        map50: if nt > 0 { at(0).unwrap_or(0.0) } else { 0.0 },
        map50_95: all_thresholds(0).unwrap_or(0.0),
        ap_small: all_thresholds(1),
        ap_medium: all_thresholds(2),
        ap_large: all_thresholds(3),
        iou_thresholds: params.iou_thresholds.clone(),
        categories,
        sizes: dataset_stats(corpus, params.target_size)?,
        num_images: images.len(),
        num_predictions: preds.len(),
    })
}
