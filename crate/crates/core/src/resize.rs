//! Bicubic resampling (Keys cubic convolution, a = -0.5).
//!
//! Source coordinates use half-pixel-center alignment,
//! `src = (dst + 0.5) * in / out - 0.5`, and each output pixel is the
//! weighted sum over the 4×4 neighbourhood anchored at `floor(src) - 1`.
//! Taps that fall outside the image clamp to the nearest edge pixel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_kernel(t: f64) -> f64 {
    let a = KEYS_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Weights for the four taps `floor(src) - 1 ..= floor(src) + 2` given the
/// fractional offset `frac = src - floor(src)` in `[0, 1)`.
pub fn tap_weights(frac: f64) -> [f64; 4] {
    [
        cubic_kernel(frac + 1.0),
        cubic_kernel(frac),
        cubic_kernel(1.0 - frac),
        cubic_kernel(2.0 - frac),
    ]
}

/// Clamped source indices and weights for one output coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

/// Per-output taps along one axis.
pub fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let ratio = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let weight = tap_weights(src - base);
            let base = base as isize - 1;
            let mut index = [0usize; 4];
            for (k, idx) in index.iter_mut().enumerate() {
                *idx = (base + k as isize).clamp(0, last) as usize;
            }
            Taps { index, weight }
        })
        .collect()
}

fn check_sizes<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::spec(format!(
            "bicubic_resize: target size {out_h}x{out_w} must be at least 1x1"
        )));
    }
    if input.h() == 0 || input.w() == 0 {
        return Err(Error::spec("bicubic_resize: input has an empty spatial axis"));
    }
    Ok(())
}

pub fn bicubic_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_sizes(input, out_h, out_w)?;
    input.check_finite("bicubic_resize")?;
    let [n, c, h, w] = input.dims();
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for ni in 0..n {
        for ci in 0..c {
            let plane = input.plane(ni, ci);
            for yt in &ty {
                for xt in &tx {
                    let mut acc = 0.0f64;
                    for (&iy, &wy) in yt.index.iter().zip(&yt.weight) {
                        let row = &plane[iy * w..];
                        for (&ix, &wx) in xt.index.iter().zip(&xt.weight) {
                            acc += wy * wx * row[ix].to_f64();
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Adjoint of [`bicubic_resize`]: scatters `grad_out` back through the same weights.
pub fn bicubic_resize_backward<T: Scalar>(
    in_dims: crate::tensor::Dims,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = in_dims;
    let [gn, gc, out_h, out_w] = grad_out.dims();
    if gn != n || gc != c {
        return Err(Error::Shape {
            op: "bicubic_resize_backward",
            axis: if gn != n { "N" } else { "C" },
            expected: if gn != n { n } else { c },
            got: if gn != n { gn } else { gc },
        });
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut gin = vec![0.0f64; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.plane(ni, ci);
            let dst = &mut gin[(ni * c + ci) * h * w..][..h * w];
            for (oy, yt) in ty.iter().enumerate() {
                for (ox, xt) in tx.iter().enumerate() {
                    let gv = g[oy * out_w + ox].to_f64();
                    for (&iy, &wy) in yt.index.iter().zip(&yt.weight) {
                        for (&ix, &wx) in xt.index.iter().zip(&xt.weight) {
                            dst[iy * w + ix] += wy * wx * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_dims, gin.into_iter().map(T::from_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values_at_integers() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(-1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert_eq!(tap_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn kernel_half_offset() {
        // a = -0.5: w(0.5) = 0.5625, w(1.5) = -0.0625
        let w = tap_weights(0.5);
        assert!((w[0] + 0.0625).abs() < 1e-15);
        assert!((w[1] - 0.5625).abs() < 1e-15);
        assert!((w[2] - 0.5625).abs() < 1e-15);
        assert!((w[3] + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn([1, 2, 3, 5], |[_, c, h, w]| (c * 15 + h * 5 + w) as f32 * 0.37);
        assert_eq!(bicubic_resize(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(matches!(bicubic_resize(&x, 0, 2), Err(Error::Spec(_))));
    }

    #[test]
    fn clamps_at_borders() {
        let t = axis_taps(4, 8);
        assert_eq!(t[0].index, [0, 0, 0, 1]);
        assert_eq!(t[7].index, [2, 3, 3, 3]);
    }
}
