#[path = "common/coco_reference.rs"]
mod coco_reference;

use cmafnet::detect::PredictionRecord;
use cmafnet::evalkit::*;
use cmafnet::Error;
use coco_reference::{random_dataset, reference_eval};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() < 1e-9,
        _ => false,
    }
}

#[test]
fn matches_reference_on_random_micro_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (corpus, preds) = random_dataset(&mut rng);
        let max_dets = if case % 4 == 0 { 2 } else { 100 };
        let params = EvalParams { max_dets, ..EvalParams::default() };
        let got = coco_summary(&corpus, &preds, &params).unwrap();
        let want = reference_eval(&corpus, &preds, max_dets);
        assert!((got.map50 - want.map50).abs() < 1e-9, "case {case}: map50 {} vs {}", got.map50, want.map50);
        assert!((got.map50_95 - want.map50_95).abs() < 1e-9, "case {case}: map50_95");
        let ranges = [got.ap_small, got.ap_medium, got.ap_large];
        for (r, (g, w)) in ranges.iter().zip(want.by_range).enumerate() {
            assert!(close(*g, w), "case {case}: range {r} {g:?} vs {w:?}");
        }
        for (cat, w) in got.categories.iter().zip(&want.per_cat) {
            for (g, w) in cat.ap.iter().zip(w) {
                assert!(close(*g, *w), "case {case}: category {}", cat.id);
            }
        }
        assert!((got.precision - want.precision).abs() < 1e-12);
        assert!((got.recall - want.recall).abs() < 1e-12);
    }
}

#[test]
fn hand_walked_case_gives_51_over_101() {
    let corpus = Corpus {
        images: vec![ImageInfo { id: 1, width: 640, height: 640, file_name: None, depth_file_name: None }],
        categories: vec![Category { id: 1, name: "a".into() }],
        annotations: vec![
            Annotation { id: 1, image_id: 1, category_id: 1, bbox: [0.0, 0.0, 50.0, 50.0] },
            Annotation { id: 2, image_id: 1, category_id: 1, bbox: [200.0, 200.0, 50.0, 50.0] },
        ],
    };
    // top prediction hits GT 1, the second lands nowhere
    let preds = vec![
        PredictionRecord { image_id: 1, category_id: 1, bbox: [0.0, 0.0, 50.0, 50.0], score: 0.9 },
        PredictionRecord { image_id: 1, category_id: 1, bbox: [400.0, 400.0, 50.0, 50.0], score: 0.8 },
    ];
    let r = coco_summary(&corpus, &preds, &EvalParams::default()).unwrap();
    assert!((r.map50 - 51.0 / 101.0).abs() < 1e-15);
    assert_eq!(average_precision(&[true, false], 2), Some(51.0 / 101.0));
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (corpus, _) = loop {
        let d = random_dataset(&mut rng);
        if d.0.annotations.len() >= 5 {
            break d;
        }
    };
    let preds: Vec<PredictionRecord> = corpus
        .annotations
        .iter()
        .map(|a| PredictionRecord { image_id: a.image_id, category_id: a.category_id, bbox: a.bbox, score: 1.0 })
        .collect();
    let r = coco_summary(&corpus, &preds, &EvalParams::default()).unwrap();
    assert_eq!((r.map50, r.map50_95, r.precision, r.recall), (1.0, 1.0, 1.0, 1.0));
    for ap in [r.ap_small, r.ap_medium, r.ap_large].into_iter().flatten() {
        assert_eq!(ap, 1.0);
    }
    for c in &r.categories {
        assert!(c.ap.iter().all(|a| a.is_none() || *a == Some(1.0)));
    }
}

#[test]
fn size_buckets_split_after_rescale() {
    // a 320x320 image doubles each side on the way to 640
    let boxes = [
        ([0.0, 0.0, 15.9, 15.9], SizeBucket::Small),
        ([100.0, 0.0, 16.0, 16.0], SizeBucket::Medium),
        ([200.0, 0.0, 47.9, 47.9], SizeBucket::Medium),
        ([0.0, 100.0, 48.0, 48.0], SizeBucket::Large),
    ];
    let corpus = Corpus {
        images: vec![ImageInfo { id: 1, width: 320, height: 320, file_name: None, depth_file_name: None }],
        categories: vec![Category { id: 1, name: "a".into() }],
        annotations: boxes
            .iter()
            .enumerate()
            .map(|(i, (b, _))| Annotation { id: i as u64, image_id: 1, category_id: 1, bbox: *b })
            .collect(),
    };
    let h = dataset_stats(&corpus, 640.0).unwrap();
    assert_eq!(h.counts, [1, 2, 1]);
    for (b, bucket) in boxes {
        assert_eq!(size_bucket(b[2] * b[3] * 4.0), bucket);
    }
    assert_eq!(size_bucket(32.0 * 32.0), SizeBucket::Medium);
    assert_eq!(size_bucket(96.0 * 96.0), SizeBucket::Large);

    // a perfect hit on only the small box: AP_s = 1, the others see misses
    let preds = vec![PredictionRecord { image_id: 1, category_id: 1, bbox: boxes[0].0, score: 0.5 }];
    let r = coco_summary(&corpus, &preds, &EvalParams::default()).unwrap();
    assert_eq!(r.ap_small, Some(1.0));
    assert_eq!(r.ap_medium, Some(0.0));
    assert_eq!(r.ap_large, Some(0.0));
}

#[test]
fn monotone_score_rescaling_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..30 {
        let (corpus, preds) = random_dataset(&mut rng);
        let scaled: Vec<PredictionRecord> =
            preds.iter().map(|p| PredictionRecord { score: p.score * 0.25 + 0.1, ..*p }).collect();
        let a = coco_summary(&corpus, &preds, &EvalParams::default()).unwrap();
        let b = coco_summary(&corpus, &scaled, &EvalParams::default()).unwrap();
        assert_eq!(
            (a.map50, a.map50_95, a.ap_small, a.ap_medium, a.ap_large),
            (b.map50, b.map50_95, b.ap_small, b.ap_medium, b.ap_large)
        );
    }
}

#[test]
fn unknown_category_is_an_error() {
    let corpus = Corpus {
        images: vec![ImageInfo { id: 1, width: 64, height: 64, file_name: None, depth_file_name: None }],
        categories: Corpus::default_categories(),
        annotations: vec![],
    };
    let preds = vec![PredictionRecord { image_id: 1, category_id: 42, bbox: [0.0, 0.0, 4.0, 4.0], score: 0.5 }];
    assert!(matches!(coco_summary(&corpus, &preds, &EvalParams::default()), Err(Error::UnknownCategory(42))));
    let mut bad = corpus.clone();
    bad.annotations.push(Annotation { id: 1, image_id: 1, category_id: 10, bbox: [0.0, 0.0, 4.0, 4.0] });
    assert!(matches!(coco_summary(&bad, &[], &EvalParams::default()), Err(Error::UnknownCategory(10))));
}

#[test]
fn nine_predefined_labels() {
    let cats = Corpus::default_categories();
    assert_eq!(cats.len(), 9);
    assert_eq!(cats[0].name, "zcjyz");
    assert_eq!(cats[8], Category { id: 9, name: "zyzsl".into() });
}
