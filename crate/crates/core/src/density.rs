//! Ground-truth density maps from head annotations using geometry-adaptive
//! Gaussian kernels: each point gets σ = β · (mean distance to its k nearest
//! neighbours), clamped to `[sigma_floor, sigma_cap]`.
//!
//! Every splat is renormalized to unit mass after truncation and border
//! clipping, so a map always integrates to its point count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// σ used for scenes with a single annotated point when no fixed σ is set.
pub const SINGLE_POINT_SIGMA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl SceneAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("annotation: width and height must be positive"));
        }
        for (i, &[x, y]) in self.points.iter().enumerate() {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..self.width as f64).contains(&x)
                && (0.0..self.height as f64).contains(&y);
            if !inside {
                return Err(Error::arg(format!(
                    "annotation: point {i} ({x}, {y}) outside {}x{}",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtParams {
    pub k: usize,
    pub beta: f64,
    pub sigma_floor: f64,
    pub sigma_cap: f64,
    /// Truncation radius in multiples of σ.
    pub truncation_radius: f64,
    /// Fixed σ for every point; disables the adaptive rule.
    pub fixed_sigma: Option<f64>,
}

impl Default for GtParams {
    fn default() -> Self {
        Self {
            k: 10,
            beta: 0.3,
            sigma_floor: 0.5,
            sigma_cap: 15.0,
            truncation_radius: 4.0,
            fixed_sigma: None,
        }
    }
}

impl GtParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k >= 1
            && self.beta > 0.0
            && self.sigma_floor > 0.0
            && self.sigma_floor <= self.sigma_cap
            && self.truncation_radius > 0.0
            && self.fixed_sigma.is_none_or(|s| s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid ground-truth parameters {self:?}")))
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean distance from `points[i]` to its `min(k, n-1)` nearest other points.
///
/// Fails with [`Error::Argument`] when there is no other point; callers
/// fall back to a fixed σ in that case.
pub fn knn_mean_distance(points: &[[f64; 2]], i: usize, k: usize) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::arg(
            "k-NN distance needs at least two points; use a fixed sigma",
        ));
    }
    if i >= points.len() || k == 0 {
        return Err(Error::arg(format!("k-NN query i={i} k={k} out of range")));
    }
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &p)| dist(points[i], p))
        .collect();
    let m = k.min(d.len());
    d.select_nth_unstable_by(m - 1, f64::total_cmp);
    let nearest = &mut d[..m];
    nearest.sort_unstable_by(f64::total_cmp);
    Ok(nearest.iter().sum::<f64>() / m as f64)
}

pub fn adaptive_sigma(d_bar: f64, params: &GtParams) -> f64 {
    (params.beta * d_bar).clamp(params.sigma_floor, params.sigma_cap)
}

/// Adds one unit-mass truncated Gaussian centred at sub-pixel `center`
/// (pixel `(c, r)` has its centre at `(c + 0.5, r + 0.5)`).
pub fn splat_gaussian(
    map: &mut [f64],
    width: usize,
    height: usize,
    center: [f64; 2],
    sigma: f64,
    params: &GtParams,
) {
    let radius = (params.truncation_radius * sigma).ceil() as isize;
    let cx = center[0].floor() as isize;
    let cy = center[1].floor() as isize;
    let x0 = (cx - radius).max(0);
    let x1 = (cx + radius).min(width as isize - 1);
    let y0 = (cy - radius).max(0);
    let y1 = (cy + radius).min(height as isize - 1);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gx: Vec<f64> = (x0..=x1)
        .map(|x| {
            let d = x as f64 + 0.5 - center[0];
            (-d * d * inv).exp()
        })
        .collect();
    let gy: Vec<f64> = (y0..=y1)
        .map(|y| {
            let d = y as f64 + 0.5 - center[1];
            (-d * d * inv).exp()
        })
        .collect();
    let total = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
    if total <= 0.0 {
        // σ far below a pixel: all mass goes to the containing pixel.
        map[cy as usize * width + cx as usize] += 1.0;
        return;
    }
    for (yi, &wy) in gy.iter().enumerate() {
        let row = (y0 as usize + yi) * width;
        for (xi, &wx) in gx.iter().enumerate() {
            map[row + x0 as usize + xi] += wy * wx / total;
        }
    }
}

/// Per-point σ in annotation order.
pub fn point_sigmas(ann: &SceneAnnotation, params: &GtParams) -> Result<Vec<f64>> {
    let n = ann.points.len();
    (0..n)
        .map(|i| match params.fixed_sigma {
            Some(s) => Ok(s),
            None if n == 1 => Ok(SINGLE_POINT_SIGMA),
            None => Ok(adaptive_sigma(
                knn_mean_distance(&ann.points, i, params.k)?,
                params,
            )),
        })
        .collect()
}

/// 1×1×H×W density map for `ann`.
pub fn generate_density_map(ann: &SceneAnnotation, params: &GtParams) -> Result<Tensor> {
    ann.validate()?;
    params.validate()?;
    let (w, h) = (ann.width, ann.height);
    let sigmas = point_sigmas(ann, params)?;
    // Splat in a canonical point order so permuted annotations give identical bits.
    let mut order: Vec<usize> = (0..ann.points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (ann.points[a], ann.points[b]);
        pa[1]
            .total_cmp(&pb[1])
            .then(pa[0].total_cmp(&pb[0]))
            .then(sigmas[a].total_cmp(&sigmas[b]))
    });
    let mut acc = vec![0.0f64; w * h];
    for i in order {
        splat_gaussian(&mut acc, w, h, ann.points[i], sigmas[i], params);
    }
    Tensor::new([1, 1, h, w], acc.into_iter().map(|v| v as f32).collect())
}

/// Sum-pools each item down to `out_h`×`out_w` over equal blocks.
pub fn pool_to<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = map.dims();
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::spec(format!(
            "pool_to: {h}x{w} is not an integer multiple of {out_h}x{out_w}"
        )));
    }
    let (bh, bw) = (h / out_h, w / out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut acc = vec![0.0f64; out_h * out_w];
    for ni in 0..n {
        for ci in 0..c {
            acc.fill(0.0);
            let plane = map.plane(ni, ci);
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                let dst = &mut acc[(y / bh) * out_w..][..out_w];
                for (x, v) in row.iter().enumerate() {
                    dst[x / bw] += v.to_f64();
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(w: usize, h: usize, pts: &[[f64; 2]]) -> SceneAnnotation {
        SceneAnnotation {
            width: w,
            height: h,
            points: pts.to_vec(),
        }
    }

    #[test]
    fn knn_examples() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(knn_mean_distance(&pts, 1, 2).unwrap(), 1.0);
        let pts = [[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(knn_mean_distance(&pts, 0, 10).unwrap(), 5.0);
        assert!(knn_mean_distance(&[[1.0, 1.0]], 0, 10).is_err());
    }

    #[test]
    fn sigma_examples() {
        let p = GtParams::default();
        assert!((adaptive_sigma(10.0, &p) - 3.0).abs() < 1e-12);
        assert_eq!(adaptive_sigma(0.0, &p), 0.5);
        assert_eq!(adaptive_sigma(100.0, &p), 15.0);
    }

    #[test]
    fn single_interior_and_corner_points_have_unit_mass() {
        let p = GtParams::default();
        for pt in [[20.3, 17.8], [0.0, 0.0], [39.99, 29.99]] {
            let m = generate_density_map(&ann(40, 30, &[pt]), &p).unwrap();
            assert!((m.sum_f64() - 1.0).abs() < 1e-6, "{pt:?}");
        }
    }

    #[test]
    fn splat_peak_and_symmetry() {
        let p = GtParams::default();
        let (w, h) = (41, 41);
        let mut map = vec![0.0; w * h];
        splat_gaussian(&mut map, w, h, [20.5, 20.5], 2.0, &p);
        let at = |x: usize, y: usize| map[y * w + x];
        let centre = at(20, 20);
        assert!(centre > at(28, 20) && centre > at(20, 12));
        assert!((at(23, 20) - at(17, 20)).abs() < 1e-15);
        assert!((at(20, 23) - at(23, 20)).abs() < 1e-15);
        // ratio between pixel offsets follows exp(-d²/2σ²)
        let ratio = at(22, 20) / centre;
        assert!((ratio - (-4.0f64 / 8.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn empty_and_two_point_maps() {
        let p = GtParams::default();
        let m = generate_density_map(&ann(16, 16, &[]), &p).unwrap();
        assert_eq!(m.sum_f64(), 0.0);
        let m = generate_density_map(&ann(64, 64, &[[3.0, 3.0], [60.0, 60.0]]), &p).unwrap();
        assert!((m.sum_f64() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_point_rejected() {
        let p = GtParams::default();
        assert!(generate_density_map(&ann(8, 8, &[[8.0, 1.0]]), &p).is_err());
        assert!(generate_density_map(&ann(8, 8, &[[1.0, -0.1]]), &p).is_err());
    }

    #[test]
    fn pool_cases() {
        let c = Tensor::full([1, 1, 4, 6], 0.25f32);
        let pooled = pool_to(&c, 2, 3).unwrap();
        assert!(pooled.data().iter().all(|&v| v == 1.0));
        assert!(matches!(pool_to(&c, 3, 3), Err(Error::Spec(_))));
    }

    #[test]
    fn permutation_is_bit_identical() {
        let pts = [[3.2, 4.1], [10.0, 12.5], [11.0, 12.0], [30.5, 2.25], [20.0, 20.0]];
        let p = GtParams::default();
        let a = generate_density_map(&ann(32, 32, &pts), &p).unwrap();
        let mut rev = pts.to_vec();
        rev.reverse();
        let b = generate_density_map(&ann(32, 32, &rev), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_sigma_equals_adaptive_on_regular_lattice() {
        // Two points: each one's only neighbour is at distance 10 → σ = 3.
        let pts = [[10.0, 16.0], [20.0, 16.0]];
        let adaptive = generate_density_map(&ann(32, 32, &pts), &GtParams::default()).unwrap();
        let fixed = generate_density_map(
            &ann(32, 32, &pts),
            &GtParams {
                fixed_sigma: Some(0.3 * 10.0),
                ..GtParams::default()
            },
        )
        .unwrap();
        assert_eq!(adaptive, fixed);
    }
}
