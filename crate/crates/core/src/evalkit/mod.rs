//! COCO-style detection evaluation and dataset size auditing.

mod metrics;
mod stats;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::Result;

pub use crate::bbox::iou;
pub use metrics::{
    average_precision, coco_summary, match_detections, precision_envelope_points, CategoryReport,
    EvalParams, EvalReport, MatchResult, RECALL_POINTS,
};
pub use stats::{dataset_stats, size_bucket, SizeBucket, SizeHistogram, LARGE_MIN_AREA, SMALL_MAX_AREA};

/// Frame in which object areas are bucketed.
pub const REFERENCE_SIZE: f64 = 640.0;

/// Defect labels of the transmission-line RGB-D label set, ids 1..=9.
pub const DEFECT_LABELS: [&str; 9] =
    ["zcjyz", "jyzwh", "dgss", "zxqs", "zxst", "jyzsl", "nw", "jyzps", "zyzsl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn bbox(&self) -> BBox {
        BBox::from_array(self.bbox)
    }
}

/// Annotation corpus: images, categories and boxes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub images: Vec<ImageInfo>,
    pub categories: Vec<Category>,
    pub annotations: Vec<Annotation>,
}

impl Corpus {
    pub fn default_categories() -> Vec<Category> {
        DEFECT_LABELS
            .iter()
            .enumerate()
            .map(|(i, n)| Category { id: i as u32 + 1, name: n.to_string() })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }
}
