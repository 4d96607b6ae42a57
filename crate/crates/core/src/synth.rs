//! Desk-scale synthetic crowd scenes: dark radial blobs on a noisy light
//! background, placed in Gaussian clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::SceneAnnotation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.8;
const BLOB_DEPTH: f64 = 0.7;
const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub scenes: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub clusters: usize,
    /// Standard deviation of points around their cluster centre, in pixels.
    pub cluster_spread: f64,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    /// Standard deviation of the additive background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            scenes: 8,
            count_min: 5,
            count_max: 20,
            clusters: 3,
            cluster_spread: 8.0,
            blob_radius_min: 1.5,
            blob_radius_max: 3.0,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.width.is_multiple_of(16)
            && self.height.is_multiple_of(16)
            && self.count_min <= self.count_max
            && self.clusters >= 1
            && self.cluster_spread.is_finite()
            && self.cluster_spread >= 0.0
            && self.blob_radius_min > 0.0
            && self.blob_radius_min <= self.blob_radius_max
            && self.blob_radius_max.is_finite()
            && self.noise.is_finite()
            && self.noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "invalid synth spec (sizes must be positive multiples of 16, min <= max): {self:?}"
            )))
        }
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_point(rng: &mut ChaCha8Rng, center: [f64; 2], spread: f64, w: f64, h: f64) -> [f64; 2] {
    if spread > 0.0 {
        let normal = Normal::new(0.0, spread).expect("finite spread");
        for _ in 0..MAX_REJECTIONS {
            let p = [center[0] + normal.sample(rng), center[1] + normal.sample(rng)];
            if (0.0..w).contains(&p[0]) && (0.0..h).contains(&p[1]) {
                return p;
            }
        }
    } else if (0.0..w).contains(&center[0]) && (0.0..h).contains(&center[1]) {
        return center;
    }
    [rng.random_range(0.0..w), rng.random_range(0.0..h)]
}

/// Scene `index` of `spec`: a 1×3×H×W image quantized to 8-bit levels, and
/// its exact head points.
pub fn synth_scene(spec: &SynthSpec, index: usize) -> Result<(Tensor, SceneAnnotation)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = scene_rng(spec.seed, index);

    let count = rng.random_range(spec.count_min..=spec.count_max);
    let centers: Vec<[f64; 2]> = (0..spec.clusters)
        .map(|_| [rng.random_range(0.0..wf), rng.random_range(0.0..hf)])
        .collect();
    let mut points = Vec::with_capacity(count);
    let mut radii = Vec::with_capacity(count);
    for _ in 0..count {
        let c = centers[rng.random_range(0..centers.len())];
        points.push(sample_point(&mut rng, c, spec.cluster_spread, wf, hf));
        radii.push(rng.random_range(spec.blob_radius_min..=spec.blob_radius_max));
    }

    let mut plane = vec![BACKGROUND; w * h];
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        for v in &mut plane {
            *v += normal.sample(&mut rng);
        }
    }
    for (p, &r) in points.iter().zip(&radii) {
        let reach = (3.0 * r).ceil() as isize;
        let (cx, cy) = (p[0].floor() as isize, p[1].floor() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let dx = x as f64 + 0.5 - p[0];
                let dy = y as f64 + 0.5 - p[1];
                let g = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                plane[y as usize * w + x as usize] *= 1.0 - BLOB_DEPTH * g;
            }
        }
    }
    let gray: Vec<f32> = plane
        .iter()
        .map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0)
        .collect();
    let image = Tensor::from_fn([1, 3, h, w], |[_, _, y, x]| gray[y * w + x]);
    let ann = SceneAnnotation {
        width: w,
        height: h,
        points,
    };
    Ok((image, ann))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{generate_density_map, GtParams};

    #[test]
    fn exact_count_range() {
        let spec = SynthSpec {
            count_min: 5,
            count_max: 5,
            ..SynthSpec::default()
        };
        for i in 0..4 {
            let (img, ann) = synth_scene(&spec, i).unwrap();
            assert_eq!(ann.count(), 5);
            assert_eq!(img.dims(), [1, 3, 64, 64]);
            ann.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let spec = SynthSpec::default();
        assert_eq!(synth_scene(&spec, 3).unwrap(), synth_scene(&spec, 3).unwrap());
        assert_ne!(synth_scene(&spec, 3).unwrap().1, synth_scene(&spec, 4).unwrap().1);
    }

    #[test]
    fn density_mass_matches_count() {
        let spec = SynthSpec::default();
        for i in 0..4 {
            let (_, ann) = synth_scene(&spec, i).unwrap();
            let sum = generate_density_map(&ann, &GtParams::default()).unwrap().sum_f64();
            let n = ann.count() as f64;
            assert!((sum - n).abs() <= 1e-4 * n, "{sum} vs {n}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SynthSpec {
            width: 60,
            ..SynthSpec::default()
        };
        assert!(synth_scene(&bad, 0).is_err());
        let bad = SynthSpec {
            count_min: 9,
            count_max: 3,
            ..SynthSpec::default()
        };
        assert!(synth_scene(&bad, 0).is_err());
    }
}
