use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NoiseSpec, Raster};

/// Minimum step to a brighter neighbour for a pixel to count as being next
/// to a foreground boundary.
pub const BLEED_JUMP: f64 = 0.05;

/// Depth sensor artefacts in a fixed order: missing readings (set to 0),
/// edge bleeding (foreground depth smeared over a Chebyshev radius across
/// depth jumps), then uniform quantization. Holes stay 0 throughout.
pub fn corrupt_depth(depth: &Raster, noise: &NoiseSpec, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (depth.height, depth.width);
    let mut out = depth.clone();

    let mut hole = vec![false; out.data.len()];
    if noise.hole_fraction > 0.0 {
        for (v, is_hole) in out.data.iter_mut().zip(hole.iter_mut()) {
            if rng.gen::<f64>() < noise.hole_fraction {
                *v = 0.0;
                *is_hole = true;
            }
        }
    }

    let r = noise.edge_bleed_radius;
    if r > 0 {
        let src = out.data.clone();
        for c in 0..out.channels {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if hole[c * h * w + i] {
                        continue;
                    }
                    let mut peak = plane[i];
                    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                            peak = peak.max(plane[yy * w + xx]);
                        }
                    }
                    if peak - plane[i] > BLEED_JUMP {
                        out.data[c * h * w + i] = peak;
                    }
                }
            }
        }
    }

    let levels = noise.quantization_levels;
    if levels >= 2 {
        let steps = (levels - 1) as f64;
        for (v, &is_hole) in out.data.iter_mut().zip(&hole) {
            if !is_hole {
                *v = (*v * steps).round() / steps;
            }
        }
    }
    out
}

/// Illumination gain with a linear tilt, then additive white specular blobs,
/// clamped to `[0, 1]`.
pub fn corrupt_rgb(rgb: &Raster, noise: &NoiseSpec, seed: u64) -> Raster {
    let [lo, hi] = noise.illumination_gain;
    if lo == 1.0 && hi == 1.0 && noise.specular_blob_count == 0 {
        return rgb.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rgb.height, rgb.width);
    let mut out = rgb.clone();

    let gain = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let tilt = (hi - lo) / 2.0;
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let blobs: Vec<(f64, f64, f64, f64)> = (0..noise.specular_blob_count)
        .map(|_| {
            let sigma = rng.gen_range(1.0..(w.min(h) as f64 / 40.0).max(1.5));
            (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), sigma, rng.gen_range(0.4..0.9))
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64 - 0.5, (y as f64 + 0.5) / h as f64 - 0.5);
            let g = gain * (1.0 + tilt * (u * ca + v * sa));
            let spec: f64 = blobs
                .iter()
                .map(|&(bx, by, s, a)| {
                    let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
            for c in 0..out.channels {
                let i = out.idx(c, y, x);
                out.data[i] = (out.data[i] * g + spec).clamp(0.0, 1.0);
            }
        }
    }
    out
}
