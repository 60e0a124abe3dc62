use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use super::{corpus_of, Raster, SceneSample};
use crate::detect::GroundTruth;
use crate::error::{Error, Result};
use crate::evalkit::{Category, Corpus};

pub const ANNOTATION_FILE: &str = "annotations.json";

/// Writes `rgb_NNNNN.png` (8-bit), `depth_NNNNN.png` (16-bit, 0 = hole)
/// and the annotation corpus into `dir`.
pub fn write_samples(samples: &[SceneSample], categories: Vec<Category>, dir: &Path) -> Result<Corpus> {
    std::fs::create_dir_all(dir)?;
    let mut corpus = corpus_of(samples, categories);
    for (s, info) in samples.iter().zip(corpus.images.iter_mut()) {
        let (w, h) = (s.rgb.width as u32, s.rgb.height as u32);
        let plane = (h * w) as usize;
        let mut rgb = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                rgb.push((s.rgb.data[c * plane + p] * 255.0).round() as u8);
            }
        }
        let depth: Vec<u16> = s.depth.data.iter().map(|v| (v * 65535.0).round() as u16).collect();
        let rgb_name = format!("rgb_{:05}.png", s.index);
        let depth_name = format!("depth_{:05}.png", s.index);
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, rgb)
            .expect("buffer sized to image")
            .save(dir.join(&rgb_name))?;
        ImageBuffer::<Luma<u16>, _>::from_raw(w, h, depth)
            .expect("buffer sized to image")
            .save(dir.join(&depth_name))?;
        info.file_name = Some(rgb_name);
        info.depth_file_name = Some(depth_name);
    }
    corpus.save(dir.join(ANNOTATION_FILE))?;
    Ok(corpus)
}

/// Loads a directory written by [`write_samples`]. Sample index is
/// `image id - 1`.
pub fn read_samples(dir: &Path) -> Result<(Corpus, Vec<SceneSample>)> {
    let corpus = Corpus::load(dir.join(ANNOTATION_FILE))?;
    let mut samples = Vec::with_capacity(corpus.images.len());
    for info in &corpus.images {
        let (Some(rgb_name), Some(depth_name)) = (&info.file_name, &info.depth_file_name) else {
            return Err(Error::Parse(format!("image {} lacks raster file names", info.id)));
        };
        let rgb = image::open(dir.join(rgb_name))?.to_rgb8();
        let depth = image::open(dir.join(depth_name))?.to_luma16();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if (depth.width() as usize, depth.height() as usize) != (w, h) {
            return Err(Error::Shape(format!("image {}: rgb and depth sizes differ", info.id)));
        }
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f64 / 255.0;
            }
        }
        let gts = corpus
            .annotations
            .iter()
            .filter(|a| a.image_id == info.id)
            .map(|a| {
                if a.category_id == 0 || !corpus.categories.iter().any(|c| c.id == a.category_id) {
                    return Err(Error::UnknownCategory(a.category_id));
                }
                Ok(GroundTruth { bbox: a.bbox(), class: a.category_id as usize - 1 })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(SceneSample {
            index: info.id.saturating_sub(1) as usize,
            rgb: Raster::from_vec(3, h, w, data)?,
            depth: Raster::from_vec(1, h, w, depth.pixels().map(|p| p[0] as f64 / 65535.0).collect())?,
            gts,
        });
    }
    Ok((corpus, samples))
}
