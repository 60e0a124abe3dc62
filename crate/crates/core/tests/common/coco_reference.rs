//! Straightforward COCO-style evaluator written independently of the
//! library, plus a generator of small random datasets to compare on.

use cmafnet::detect::PredictionRecord;
use cmafnet::evalkit::{Annotation, Category, Corpus, ImageInfo};
use rand::Rng;

fn iou_xywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let iy = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per image/category/range outcome, laid out the way the classic COCO
/// evaluator keeps it: every kept detection stays in the arrays, ignored
/// ones are flagged rather than dropped.
struct ImageEval {
    scores: Vec<f64>,
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    gt_ignored: Vec<bool>,
}

fn evaluate_image(
    gts: &[[f64; 4]],
    dts: &[([f64; 4], f64)],
    scale: f64,
    range: (f64, f64),
    thresholds: &[f64],
    max_dets: usize,
) -> ImageEval {
    let outside = |b: &[f64; 4]| {
        let a = b[2] * b[3] * scale;
        a < range.0 || a >= range.1
    };
    // non-ignored ground truths first
    let mut g_idx: Vec<usize> = (0..gts.len()).collect();
    g_idx.sort_by_key(|&i| outside(&gts[i]));
    let g: Vec<[f64; 4]> = g_idx.iter().map(|&i| gts[i]).collect();
    let g_ign: Vec<bool> = g.iter().map(&outside).collect();

    // stable descending sort, then per-image cap
    let mut d_idx: Vec<usize> = (0..dts.len()).collect();
    d_idx.sort_by(|&a, &b| dts[b].1.partial_cmp(&dts[a].1).unwrap());
    d_idx.truncate(max_dets);
    let d: Vec<([f64; 4], f64)> = d_idx.iter().map(|&i| dts[i]).collect();

    let mut matched = vec![vec![false; d.len()]; thresholds.len()];
    let mut ignored = vec![vec![false; d.len()]; thresholds.len()];
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; g.len()];
        for (di, det) in d.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..g.len() {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(mi) = m {
                    if !g_ign[mi] && g_ign[gi] {
                        break;
                    }
                }
                let o = iou_xywh(&det.0, &g[gi]);
                if o < best {
                    continue;
                }
                best = o;
                m = Some(gi);
            }
            if let Some(mi) = m {
                gt_taken[mi] = true;
                matched[ti][di] = true;
                ignored[ti][di] = g_ign[mi];
            } else {
                ignored[ti][di] = outside(&det.0);
            }
        }
    }
    ImageEval { scores: d.iter().map(|x| x.1).collect(), matched, ignored, gt_ignored: g_ign }
}

/// Accumulates one (category, range, threshold) cell; `None` when the cell
/// has neither ground truth nor detections.
fn accumulate(evals: &[ImageEval], ti: usize) -> Option<f64> {
    let mut scores = Vec::new();
    let mut m = Vec::new();
    let mut ig = Vec::new();
    for e in evals {
        scores.extend_from_slice(&e.scores);
        m.extend_from_slice(&e.matched[ti]);
        ig.extend_from_slice(&e.ignored[ti]);
    }
    let npig = evals.iter().flat_map(|e| &e.gt_ignored).filter(|&&i| !i).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let live = order.iter().filter(|&&i| !ig[i]).count();
    if npig == 0 {
        return if live == 0 { None } else { Some(0.0) };
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rc = Vec::new();
    let mut pr = Vec::new();
    for &i in &order {
        if !ig[i] {
            if m[i] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        rc.push(tp / npig as f64);
        pr.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 });
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut q = [0.0; 101];
    for (k, slot) in q.iter_mut().enumerate() {
        let r = k as f64 / 100.0;
        // leftmost recall reaching r
        if let Some(pos) = rc.iter().position(|&x| x >= r) {
            *slot = pr[pos];
        }
    }
    Some(q.iter().sum::<f64>() / 101.0)
}

pub struct Reference {
    pub map50: f64,
    pub map50_95: f64,
    pub by_range: [Option<f64>; 3],
    pub per_cat: Vec<Vec<Option<f64>>>,
    pub precision: f64,
    pub recall: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn reference_eval(corpus: &Corpus, preds: &[PredictionRecord], max_dets: usize) -> Reference {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let ranges = [(0.0, f64::INFINITY), (0.0, 1024.0), (1024.0, 9216.0), (9216.0, f64::INFINITY)];
    let mut image_ids: Vec<u64> = corpus.images.iter().map(|i| i.id).collect();
    image_ids.sort();
    let mut cells = vec![vec![vec![None; thresholds.len()]; corpus.categories.len()]; 4];
    let (mut tp50, mut det50, mut gt50) = (0usize, 0usize, 0usize);
    for (ri, &range) in ranges.iter().enumerate() {
        for (ki, cat) in corpus.categories.iter().enumerate() {
            let evals: Vec<ImageEval> = image_ids
                .iter()
                .map(|&id| {
                    let img = corpus.images.iter().find(|i| i.id == id).unwrap();
                    let scale = 640.0 / img.width as f64 * 640.0 / img.height as f64;
                    let gts: Vec<[f64; 4]> = corpus
                        .annotations
                        .iter()
                        .filter(|a| a.image_id == id && a.category_id == cat.id)
                        .map(|a| a.bbox)
                        .collect();
                    let dts: Vec<([f64; 4], f64)> = preds
                        .iter()
                        .filter(|p| p.image_id == id && p.category_id == cat.id)
                        .map(|p| (p.bbox, p.score))
                        .collect();
                    evaluate_image(&gts, &dts, scale, range, &thresholds, max_dets)
                })
                .collect();
            for ti in 0..thresholds.len() {
                cells[ri][ki][ti] = accumulate(&evals, ti);
            }
            if ri == 0 {
                for e in &evals {
                    tp50 += e.matched[0].iter().filter(|&&m| m).count();
                    det50 += e.scores.len();
                    gt50 += e.gt_ignored.len();
                }
            }
        }
    }
    let all = |ri: usize| mean(cells[ri].iter().flatten().flatten().copied());
    Reference {
        map50: mean(cells[0].iter().filter_map(|c| c[0])).unwrap_or(0.0),
        map50_95: all(0).unwrap_or(0.0),
        by_range: [all(1), all(2), all(3)],
        per_cat: cells[0].clone(),
        precision: if det50 == 0 { 0.0 } else { tp50 as f64 / det50 as f64 },
        recall: if gt50 == 0 { 0.0 } else { tp50 as f64 / gt50 as f64 },
    }
}

pub fn random_dataset(rng: &mut impl Rng) -> (Corpus, Vec<PredictionRecord>) {
    let n_cat = rng.gen_range(1..4);
    let categories: Vec<Category> = (1..=n_cat).map(|id| Category { id, name: format!("c{id}") }).collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut preds = Vec::new();
    // a few coarse score levels force ties across and within images
    let score = |rng: &mut dyn rand::RngCore| (rng.gen_range(1..8) as f64) / 8.0;
    for id in (1..=rng.gen_range(1..5u64)).rev() {
        let (w, h) = (rng.gen_range(80..400u32), rng.gen_range(80..400u32));
        images.push(ImageInfo { id, width: w, height: h, file_name: None, depth_file_name: None });
        for _ in 0..rng.gen_range(0..6) {
            let bw = rng.gen_range(2.0..w as f64 / 2.0);
            let bh = rng.gen_range(2.0..h as f64 / 2.0);
            let b = [rng.gen_range(0.0..w as f64 - bw), rng.gen_range(0.0..h as f64 - bh), bw, bh];
            let cat = rng.gen_range(1..=n_cat);
            annotations.push(Annotation { id: annotations.len() as u64 + 1, image_id: id, category_id: cat, bbox: b });
            for _ in 0..rng.gen_range(0..3) {
                let j = |rng: &mut dyn rand::RngCore, v: f64, s: f64| v + rng.gen_range(-0.3..0.3) * s;
                let pb = [j(rng, b[0], bw), j(rng, b[1], bh), (j(rng, bw, bw)).max(1.0), (j(rng, bh, bh)).max(1.0)];
                let c = if rng.gen_bool(0.85) { cat } else { rng.gen_range(1..=n_cat) };
                preds.push(PredictionRecord { image_id: id, category_id: c, bbox: pb, score: score(rng) });
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let bw = rng.gen_range(2.0..w as f64 / 2.0);
            let bh = rng.gen_range(2.0..h as f64 / 2.0);
            let b = [rng.gen_range(0.0..w as f64 - bw), rng.gen_range(0.0..h as f64 - bh), bw, bh];
            preds.push(PredictionRecord { image_id: id, category_id: rng.gen_range(1..=n_cat), bbox: b, score: score(rng) });
        }
    }
    (Corpus { images, categories, annotations }, preds)
}
