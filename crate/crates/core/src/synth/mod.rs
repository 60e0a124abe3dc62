//! Deterministic synthetic RGB-D scenes. Class identity lives in the depth
//! protrusion height; RGB renders every class at the same low contrast.

mod io;
mod noise;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detect::{Batch, GroundTruth};
use crate::error::{Error, Result};
use crate::evalkit::{Annotation, Category, Corpus, ImageInfo, LARGE_MIN_AREA, REFERENCE_SIZE, SMALL_MAX_AREA};
use crate::tensor::Tensor;

pub use io::{read_samples, write_samples, ANNOTATION_FILE};
pub use noise::{corrupt_depth, corrupt_rgb, BLEED_JUMP};

/// Width of the band around a box used as its local background.
pub const RING: usize = 2;
const PLACEMENT_RETRIES: usize = 50;

/// Dense channel-major image, `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize) -> Raster {
        Raster { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Raster> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "raster {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Raster { channels, height, width, data })
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    /// Mean over channels at one pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        (0..self.channels).map(|c| self.at(c, y, x)).sum::<f64>() / self.channels as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, self.channels, self.height, self.width])
            .expect("raster length matches its shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRule {
    pub name: String,
    /// Peak RGB contrast against the local background.
    pub rgb_contrast: f64,
    /// Depth protrusion above the background plane.
    pub depth_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive object-count range per scene.
    pub objects: [usize; 2],
    /// Small / medium / large fractions.
    pub bucket_fractions: [f64; 3],
    /// Smallest and largest box side in the 640 reference frame.
    pub min_side: f64,
    pub max_side: f64,
    /// Width/height ratio is drawn log-uniformly from `[1/(1+a), 1+a]`.
    pub aspect_jitter: f64,
    pub classes: Vec<ClassRule>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 160,
            objects: [2, 6],
            bucket_fractions: [0.9, 0.08, 0.02],
            min_side: 12.0,
            max_side: 160.0,
            aspect_jitter: 0.5,
            classes: default_classes(),
            seed: 0,
        }
    }
}

pub fn default_classes() -> Vec<ClassRule> {
    vec![
        ClassRule { name: "protrusion-defect".into(), rgb_contrast: 0.12, depth_height: 0.35 },
        ClassRule { name: "flat-defect".into(), rgb_contrast: 0.12, depth_height: 0.12 },
    ]
}

impl SceneSpec {
    fn frame_scale(&self) -> f64 {
        self.image_size as f64 / REFERENCE_SIZE
    }

    /// Side range in the reference frame for one bucket.
    pub fn side_range(&self, bucket: usize) -> (f64, f64) {
        match bucket {
            0 => (self.min_side, SMALL_MAX_AREA.sqrt()),
            1 => (SMALL_MAX_AREA.sqrt(), LARGE_MIN_AREA.sqrt()),
            _ => (LARGE_MIN_AREA.sqrt(), self.max_side),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} below 16", self.image_size));
        }
        if self.objects[0] > self.objects[1] {
            return bad(format!("object range {:?} is empty", self.objects));
        }
        let f = self.bucket_fractions;
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("bucket fractions {f:?} must be in [0,1] and sum to 1"));
        }
        for (b, &frac) in f.iter().enumerate() {
            let (lo, hi) = self.side_range(b);
            if frac > 0.0 && lo >= hi {
                return bad(format!("bucket {b} has empty side range [{lo}, {hi})"));
            }
        }
        // recoverability needs one fully covered pixel per box
        if self.min_side * self.frame_scale() < 2.0 {
            return bad(format!(
                "min_side {} maps to under 2 px at image size {}",
                self.min_side, self.image_size
            ));
        }
        let longest = self.max_side * (1.0 + self.aspect_jitter).sqrt() * self.frame_scale();
        if longest > (self.image_size - 2 * (RING + 1)) as f64 {
            return bad(format!("max_side {} does not fit image size {}", self.max_side, self.image_size));
        }
        if self.aspect_jitter < 0.0 {
            return bad("aspect_jitter must be non-negative".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class rule is required".into());
        }
        for c in &self.classes {
            if !(0.0..=1.0).contains(&c.rgb_contrast) || !(c.depth_height > 0.0 && c.depth_height <= 0.5) {
                return bad(format!("class rule {c:?} out of range"));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| Category { id: i as u32 + 1, name: c.name.clone() })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub hole_fraction: f64,
    pub edge_bleed_radius: usize,
    /// Uniform depth levels; `0` disables quantization.
    pub quantization_levels: usize,
    pub illumination_gain: [f64; 2],
    pub specular_blob_count: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            hole_fraction: 0.05,
            edge_bleed_radius: 1,
            quantization_levels: 64,
            illumination_gain: [0.8, 1.2],
            specular_blob_count: 2,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> NoiseSpec {
        NoiseSpec {
            hole_fraction: 0.0,
            edge_bleed_radius: 0,
            quantization_levels: 0,
            illumination_gain: [1.0, 1.0],
            specular_blob_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.illumination_gain;
        if !(0.0..=1.0).contains(&self.hole_fraction) {
            return Err(Error::Config(format!("hole_fraction {} outside [0,1]", self.hole_fraction)));
        }
        if self.quantization_levels == 1 {
            return Err(Error::Config("quantization_levels must be 0 (off) or at least 2".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("illumination_gain {:?} must satisfy 0 < lo <= hi", self.illumination_gain)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub index: usize,
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Raster,
    /// `1 x H x W` in `[0, 1]`; missing readings are 0.
    pub depth: Raster,
    pub gts: Vec<GroundTruth>,
}

struct Placed {
    bbox: BBox,
    class: usize,
    contrast: f64,
    tint: [f64; 3],
    height: f64,
}

fn coverage_1d(lo: f64, hi: f64, p: usize) -> f64 {
    let p = p as f64;
    (hi.min(p + 1.0) - lo.max(p)).max(0.0)
}

/// Fraction of each pixel covered by `b`, visited over its bounding pixels.
fn for_each_covered(b: &BBox, w: usize, h: usize, mut f: impl FnMut(usize, usize, f64)) {
    let [x1, y1, x2, y2] = b.corners();
    let (c0, c1) = (x1.floor().max(0.0) as usize, (x2.ceil() as usize).min(w));
    let (r0, r1) = (y1.floor().max(0.0) as usize, (y2.ceil() as usize).min(h));
    for y in r0..r1 {
        let cy = coverage_1d(y1, y2, y);
        for x in c0..c1 {
            let cov = cy * coverage_1d(x1, x2, x);
            if cov > 0.0 {
                f(y, x, cov);
            }
        }
    }
}

fn sample_box(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> BBox {
    let u: f64 = rng.gen();
    let f = spec.bucket_fractions;
    let bucket = if u < f[0] { 0 } else if u < f[0] + f[1] { 1 } else { 2 };
    let (lo, hi) = spec.side_range(bucket);
    let side = rng.gen_range(lo..hi);
    let ln_a = (1.0 + spec.aspect_jitter).ln();
    let ratio = if ln_a > 0.0 { rng.gen_range(-ln_a..ln_a).exp() } else { 1.0 };
    let s = spec.frame_scale();
    let (w, h) = (side * ratio.sqrt() * s, side / ratio.sqrt() * s);
    let size = spec.image_size as f64;
    BBox::new(rng.gen_range(0.0..=size - w), rng.gen_range(0.0..=size - h), w, h)
}

fn too_close(a: &BBox, b: &BBox) -> bool {
    let m = (RING + 1) as f64;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    ax1 < bx2 + m && bx1 < ax2 + m && ay1 < by2 + m && by1 < ay2 + m
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Noise-free scene `index` of the stream defined by `spec.seed`.
pub fn render_clean(spec: &SceneSpec, index: usize) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let s = spec.image_size;
    let sf = s as f64;

    let wanted = rng.gen_range(spec.objects[0]..=spec.objects[1]);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..wanted {
        let class = rng.gen_range(0..spec.classes.len());
        let rule = &spec.classes[class];
        let mut bbox = sample_box(spec, &mut rng);
        let mut ok = !placed.iter().any(|p| too_close(&p.bbox, &bbox));
        for _ in 0..PLACEMENT_RETRIES {
            if ok {
                break;
            }
            // keep the drawn size, move it
            bbox.x = rng.gen_range(0.0..=sf - bbox.w);
            bbox.y = rng.gen_range(0.0..=sf - bbox.h);
            ok = !placed.iter().any(|p| too_close(&p.bbox, &bbox));
        }
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let contrast = sign * rule.rgb_contrast * rng.gen_range(0.75..1.25);
        let tint = std::array::from_fn(|_| rng.gen_range(0.7..1.0));
        let height = rule.depth_height * rng.gen_range(0.9..1.1);
        if ok {
            placed.push(Placed { bbox, class, contrast, tint, height });
        }
    }
    if placed.len() < wanted {
        log::warn!("scene {index}: placed {} of {wanted} objects", placed.len());
    }

    // background: tinted grey, linear shading and a faint texture
    let grey = rng.gen_range(0.35..0.65);
    let base: [f64; 3] = std::array::from_fn(|_| grey + rng.gen_range(-0.05..0.05));
    let (gx, gy) = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));
    let (fx, fy, phase) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(0.0..6.3));
    let mut rgb = Raster::new(3, s, s);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f64 + 0.5) / sf - 0.5, (y as f64 + 0.5) / sf - 0.5);
            let tex = 0.02 * ((fx * u * std::f64::consts::TAU + phase).sin() * (fy * v * std::f64::consts::TAU).cos());
            for (c, b) in base.iter().enumerate() {
                let i = rgb.idx(c, y, x);
                rgb.data[i] = b + gx * u + gy * v + tex;
            }
        }
    }
    let d0 = rng.gen_range(0.25..0.45);
    let (dx, dy) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let mut depth = Raster::new(1, s, s);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f64 + 0.5) / sf - 0.5, (y as f64 + 0.5) / sf - 0.5);
            depth.data[y * s + x] = d0 + dx * u + dy * v;
        }
    }

    for p in &placed {
        for_each_covered(&p.bbox, s, s, |y, x, cov| {
            for c in 0..3 {
                let i = rgb.idx(c, y, x);
                rgb.data[i] += cov * p.contrast * p.tint[c];
            }
            depth.data[y * s + x] += cov * p.height;
        });
    }
    for v in rgb.data.iter_mut().chain(depth.data.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }

    let gts = placed.iter().map(|p| GroundTruth { bbox: p.bbox, class: p.class }).collect();
    Ok(SceneSample { index, rgb, depth, gts })
}

/// Scene `index` with sensor noise applied on top of the clean rendering.
pub fn generate_one(spec: &SceneSpec, noise: &NoiseSpec, index: usize) -> Result<SceneSample> {
    noise.validate()?;
    let mut sample = render_clean(spec, index)?;
    // noise streams sit above the rendering streams
    let mut rng = sample_rng(spec.seed ^ 0x6e6f_6973_6500_0000, index);
    let (rgb_seed, depth_seed) = (rng.gen::<u64>(), rng.gen::<u64>());
    sample.rgb = corrupt_rgb(&sample.rgb, noise, rgb_seed);
    sample.depth = corrupt_depth(&sample.depth, noise, depth_seed);
    Ok(sample)
}

pub fn generate(spec: &SceneSpec, noise: &NoiseSpec, n: usize) -> Result<Vec<SceneSample>> {
    if n == 0 {
        return Err(Error::Contract("generate needs n >= 1".into()));
    }
    (0..n).map(|i| generate_one(spec, noise, i)).collect()
}

/// Stacks samples of equal size into one batch.
pub fn collate(samples: &[SceneSample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.rgb.height, first.rgb.width);
    let mut rgb = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut depth = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.rgb.height, s.rgb.width, s.depth.height, s.depth.width) != (h, w, h, w)
            || s.rgb.channels != 3
            || s.depth.channels != 1
        {
            return Err(Error::Shape(format!("sample {} does not match a 3/1 x {h} x {w} batch", s.index)));
        }
        rgb.extend_from_slice(&s.rgb.data);
        depth.extend_from_slice(&s.depth.data);
    }
    Ok(Batch {
        rgb: Tensor::from_vec(rgb, &[samples.len(), 3, h, w])?,
        depth: Tensor::from_vec(depth, &[samples.len(), 1, h, w])?,
        targets: samples.iter().map(|s| s.gts.clone()).collect(),
    })
}

/// Annotation corpus of in-memory samples; image id is `index + 1` and
/// class `k` is category `k + 1`.
pub fn corpus_of(samples: &[SceneSample], categories: Vec<Category>) -> Corpus {
    let mut annotations = Vec::new();
    for s in samples {
        for g in &s.gts {
            annotations.push(Annotation {
                id: annotations.len() as u64 + 1,
                image_id: s.index as u64 + 1,
                category_id: g.class as u32 + 1,
                bbox: g.bbox.to_array(),
            });
        }
    }
    Corpus {
        images: samples
            .iter()
            .map(|s| ImageInfo {
                id: s.index as u64 + 1,
                width: s.rgb.width as u32,
                height: s.rgb.height as u32,
                file_name: None,
                depth_file_name: None,
            })
            .collect(),
        categories,
        annotations,
    }
}

/// Peak value inside `b` minus the mean of the surrounding ring, on
/// channel-mean intensity. Pixels count as inside when their centre is.
pub fn box_contrast(r: &Raster, b: &BBox) -> f64 {
    let [x1, y1, x2, y2] = b.corners();
    let ring = RING as f64;
    let (w, h) = (r.width, r.height);
    let inside = |x: usize, y: usize, grow: f64| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= x1 - grow && cx < x2 + grow && cy >= y1 - grow && cy < y2 + grow
    };
    let (mut peak, mut ring_sum, mut ring_n) = (f64::NEG_INFINITY, 0.0, 0usize);
    let c0 = (x1 - ring).floor().max(0.0) as usize;
    let c1 = ((x2 + ring).ceil() as usize).min(w);
    let r0 = (y1 - ring).floor().max(0.0) as usize;
    let r1 = ((y2 + ring).ceil() as usize).min(h);
    for y in r0..r1 {
        for x in c0..c1 {
            if inside(x, y, 0.0) {
                peak = peak.max(r.intensity(y, x));
            } else if inside(x, y, ring) {
                ring_sum += r.intensity(y, x);
                ring_n += 1;
            }
        }
    }
    if peak == f64::NEG_INFINITY {
        let (cx, cy) = b.center();
        peak = r.intensity((cy as usize).min(h - 1), (cx as usize).min(w - 1));
    }
    peak - if ring_n == 0 { 0.0 } else { ring_sum / ring_n as f64 }
}

/// Fraction of objects whose class the fixed depth rule recovers: the box
/// contrast is compared with the midpoint between the two tallest class
/// heights. Meaningful for two-class specs.
pub fn depth_rule_accuracy(spec: &SceneSpec, samples: &[SceneSample]) -> f64 {
    let mut heights: Vec<(f64, usize)> =
        spec.classes.iter().enumerate().map(|(i, c)| (c.depth_height, i)).collect();
    heights.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (high, low) = (heights[0], heights[heights.len().min(2) - 1]);
    let threshold = (high.0 + low.0) / 2.0;
    let (mut right, mut total) = (0usize, 0usize);
    for s in samples {
        for g in &s.gts {
            let guess = if box_contrast(&s.depth, &g.bbox) >= threshold { high.1 } else { low.1 };
            right += usize::from(guess == g.class);
            total += 1;
        }
    }
    right as f64 / total.max(1) as f64
}

/// Best accuracy any single threshold on RGB box contrast reaches when
/// separating class `0` from the rest, either polarity.
pub fn rgb_rule_best_accuracy(samples: &[SceneSample]) -> f64 {
    let mut scores: Vec<(f64, bool)> = samples
        .iter()
        .flat_map(|s| s.gts.iter().map(move |g| (box_contrast(&s.rgb, &g.bbox), g.class == 0)))
        .collect();
    if scores.is_empty() {
        return 0.0;
    }
    scores.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = scores.len();
    let positives = scores.iter().filter(|s| s.1).count();
    // threshold below index i: predict positive for scores[i..]
    let mut best = 0usize;
    let mut pos_below = 0usize;
    #[allow(clippy::needless_range_loop)]
    for i in 0..=n {
        let above_pos = positives - pos_below;
        let neg_below = i - pos_below;
        let right = above_pos + neg_below;
        best = best.max(right).max(n - right);
        if i < n && scores[i].1 {
            pos_below += 1;
        }
    }
    best as f64 / n as f64
}
