use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// Areas below this (in the reference frame) are small.
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
/// Areas at or above this are large.
pub const LARGE_MIN_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn contains(self, area: f64) -> bool {
        size_bucket(area) == self
    }
}

pub fn size_bucket(area: f64) -> SizeBucket {
    if area < SMALL_MAX_AREA {
        SizeBucket::Small
    } else if area < LARGE_MIN_AREA {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub counts: [usize; 3],
    pub fractions: [f64; 3],
    /// Mean instance area in the reference frame.
    pub mean_area: f64,
    pub total: usize,
}

/// Buckets every annotation after rescaling its image to
/// `target_size`×`target_size`.
pub fn dataset_stats(corpus: &Corpus, target_size: f64) -> Result<SizeHistogram> {
    let mut counts = [0usize; 3];
    let mut area_sum = 0.0;
    for a in &corpus.annotations {
        let img = corpus
            .image(a.image_id)
            .ok_or_else(|| Error::Parse(format!("annotation {} refers to unknown image {}", a.id, a.image_id)))?;
        let area = a.bbox().area() * (target_size / img.width as f64) * (target_size / img.height as f64);
        counts[size_bucket(area).index()] += 1;
        area_sum += area;
    }
    let total: usize = counts.iter().sum();
    let fractions = if total == 0 { [0.0; 3] } else { counts.map(|c| c as f64 / total as f64) };
    let mean_area = if total == 0 { 0.0 } else { area_sum / total as f64 };
    Ok(SizeHistogram { counts, fractions, mean_area, total })
}
