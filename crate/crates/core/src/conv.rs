//! 2-D cross-correlation with zero padding, stride, dilation and a
//! depthwise (grouped) path, plus the adjoint kernels used by backprop.
//!
//! All dot products accumulate in f64 and are rounded once on store.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    #[serde(default = "one_pair")]
    pub stride: (usize, usize),
    #[serde(default)]
    pub padding: (usize, usize),
    #[serde(default = "one_pair")]
    pub dilation: (usize, usize),
    #[serde(default)]
    pub depthwise: bool,
    #[serde(default = "yes")]
    pub has_bias: bool,
}

fn one_pair() -> (usize, usize) {
    (1, 1)
}

fn yes() -> bool {
    true
}

impl ConvSpec {
    /// Stride-1 convolution padded so the output keeps the input size
    /// (odd kernels only).
    pub fn same(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (dilation * (k - 1) / 2, dilation * (k - 1) / 2),
            dilation: (dilation, dilation),
            depthwise: false,
            has_bias: true,
        }
    }

    pub fn groups(&self) -> usize {
        if self.depthwise {
            self.in_channels
        } else {
            1
        }
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups()
    }

    pub fn weight_dims(&self) -> Dims {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn bias_dims(&self) -> Dims {
        [self.out_channels, 1, 1, 1]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel height", self.kernel.0),
            ("kernel width", self.kernel.1),
            ("stride height", self.stride.0),
            ("stride width", self.stride.1),
            ("dilation height", self.dilation.0),
            ("dilation width", self.dilation.1),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::spec(format!("conv: {name} must be positive")));
            }
        }
        if self.depthwise && !self.out_channels.is_multiple_of(self.in_channels) {
            return Err(Error::spec(format!(
                "conv: depthwise out_channels {} is not a multiple of in_channels {}",
                self.out_channels, self.in_channels
            )));
        }
        Ok(())
    }

    /// `floor((len + 2p - d(k-1) - 1)/s) + 1`, or `None` when that is below 1.
    fn out_len(len: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = len + 2 * p;
        (padded >= span).then(|| (padded - span) / s + 1)
    }

    /// Output spatial size for an H×W input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = Self::out_len(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = Self::out_len(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::spec(format!(
                "conv: kernel {:?} dilation {:?} padding {:?} leaves no output for {h}x{w} input",
                self.kernel, self.dilation, self.padding
            ))),
        }
    }
}

/// Output positions `o` with `0 <= o*stride + offset < len_in`, as a half-open range.
#[inline]
fn valid_range(len_out: usize, len_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 {
        ((-offset) as usize).div_ceil(stride)
    } else {
        0
    };
    let room = len_in as isize - offset;
    let hi = if room <= 0 {
        0
    } else {
        (room as usize).div_ceil(stride).min(len_out)
    };
    (lo.min(hi), hi)
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    in_pg: usize,
    out_pg: usize,
}

fn check<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    spec.validate()?;
    let [n, c, h, w] = input.dims();
    if c != spec.in_channels {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "input channels",
            expected: spec.in_channels,
            got: c,
        });
    }
    let wd = weights.dims();
    let expect = spec.weight_dims();
    let names = ["weight out_channels", "weight in_channels", "kernel height", "kernel width"];
    for i in 0..4 {
        if wd[i] != expect[i] {
            return Err(Error::Shape {
                op: "conv2d",
                axis: names[i],
                expected: expect[i],
                got: wd[i],
            });
        }
    }
    match (bias, spec.has_bias) {
        (Some(b), true) => {
            if b.numel() != spec.out_channels {
                return Err(Error::Shape {
                    op: "conv2d",
                    axis: "bias",
                    expected: spec.out_channels,
                    got: b.numel(),
                });
            }
        }
        (None, false) => {}
        (Some(_), false) => return Err(Error::spec("conv2d: bias given but spec has_bias is false")),
        (None, true) => return Err(Error::spec("conv2d: spec has_bias is true but no bias given")),
    }
    let (oh, ow) = spec.output_size(h, w)?;
    let groups = spec.groups();
    Ok(Geometry {
        n,
        h,
        w,
        oh,
        ow,
        in_pg: c / groups,
        out_pg: spec.out_channels / groups,
    })
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64()).collect()
}

/// Cross-correlation of `input` (N, C_in, H, W) with `weights`
/// (C_out, C_in/groups, kh, kw).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check(input, weights, bias, spec)?;
    input.check_finite("conv2d")?;
    weights.check_finite("conv2d")?;
    if let Some(b) = bias {
        b.check_finite("conv2d")?;
    }
    let x = to_f64(input);
    let wt = to_f64(weights);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);

    let mut out = Vec::with_capacity(g.n * c_out * out_plane);
    let mut acc = vec![0.0f64; out_plane];
    for n in 0..g.n {
        for oc in 0..c_out {
            let grp = oc / g.out_pg;
            let b0 = bias.map_or(0.0, |b| b.data()[oc].to_f64());
            acc.fill(b0);
            for icg in 0..g.in_pg {
                let ic = grp * g.in_pg + icg;
                let xp = &x[(n * c_in + ic) * in_plane..][..in_plane];
                let wbase = (oc * g.in_pg + icg) * kh * kw;
                for ky in 0..kh {
                    let off_y = (ky * dh) as isize - ph;
                    let (oh_lo, oh_hi) = valid_range(g.oh, g.h, sh, off_y);
                    for kx in 0..kw {
                        let wv = wt[wbase + ky * kw + kx];
                        let off_x = (kx * dw) as isize - pw;
                        let (ow_lo, ow_hi) = valid_range(g.ow, g.w, sw, off_x);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oy in oh_lo..oh_hi {
                            let iy = (oy * sh) as isize + off_y;
                            let xrow = &xp[iy as usize * g.w..][..g.w];
                            let arow = &mut acc[oy * g.ow..][..g.ow];
                            if sw == 1 {
                                let x0 = (ow_lo as isize + off_x) as usize;
                                let xs = &xrow[x0..x0 + (ow_hi - ow_lo)];
                                for (a, &xv) in arow[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *a += wv * xv;
                                }
                            } else {
                                for (ox, a) in arow.iter_mut().enumerate().take(ow_hi).skip(ow_lo) {
                                    let ix = ((ox * sw) as isize + off_x) as usize;
                                    *a += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::new([g.n, c_out, g.oh, g.ow], out)
}

/// Gradients of a conv layer given the upstream gradient `grad_out`.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Adjoint of [`conv2d`] with respect to its input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check(input, weights, bias, spec)?;
    let expect = [g.n, spec.out_channels, g.oh, g.ow];
    crate::tensor::same_dims("conv2d_backward", expect, grad_out.dims())?;
    grad_out.check_finite("conv2d_backward")?;

    let x = to_f64(input);
    let wt = to_f64(weights);
    let go = to_f64(grad_out);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);

    let mut gx = vec![0.0f64; x.len()];
    let mut gw = vec![0.0f64; wt.len()];
    let mut gb = vec![0.0f64; c_out];

    for n in 0..g.n {
        for oc in 0..c_out {
            let grp = oc / g.out_pg;
            let gp = &go[(n * c_out + oc) * out_plane..][..out_plane];
            gb[oc] += gp.iter().sum::<f64>();
            for icg in 0..g.in_pg {
                let ic = grp * g.in_pg + icg;
                let xoff = (n * c_in + ic) * in_plane;
                let wbase = (oc * g.in_pg + icg) * kh * kw;
                for ky in 0..kh {
                    let off_y = (ky * dh) as isize - ph;
                    let (oh_lo, oh_hi) = valid_range(g.oh, g.h, sh, off_y);
                    for kx in 0..kw {
                        let widx = wbase + ky * kw + kx;
                        let wv = wt[widx];
                        let off_x = (kx * dw) as isize - pw;
                        let (ow_lo, ow_hi) = valid_range(g.ow, g.w, sw, off_x);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut wacc = 0.0f64;
                        for oy in oh_lo..oh_hi {
                            let iy = ((oy * sh) as isize + off_y) as usize;
                            let grow = &gp[oy * g.ow..][..g.ow];
                            let row_start = xoff + iy * g.w;
                            if sw == 1 {
                                let x0 = (ow_lo as isize + off_x) as usize;
                                let len = ow_hi - ow_lo;
                                let xs = &x[row_start + x0..][..len];
                                let gs = &grow[ow_lo..ow_hi];
                                let mut dot = 0.0f64;
                                for (&gv, &xv) in gs.iter().zip(xs) {
                                    dot += gv * xv;
                                }
                                wacc += dot;
                                let gxs = &mut gx[row_start + x0..][..len];
                                for (d, &gv) in gxs.iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate().take(ow_hi).skip(ow_lo) {
                                    let ix = ((ox * sw) as isize + off_x) as usize;
                                    wacc += gv * x[row_start + ix];
                                    gx[row_start + ix] += wv * gv;
                                }
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }

    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<_>>();
    Ok(ConvGrads {
        input: Tensor::new(input.dims(), cast(gx))?,
        weights: Tensor::new(weights.dims(), cast(gw))?,
        bias: if spec.has_bias {
            Some(Tensor::new(spec.bias_dims(), cast(gb))?)
        } else {
            None
        },
    })
}
