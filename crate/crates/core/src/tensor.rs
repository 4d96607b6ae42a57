//! Dense NCHW tensors and the elementwise / channel ops built on them.
//!
//! A [`Tensor`] is always rank 4 and row-major with W varying fastest. It is
//! generic over the element type so the same kernels run in `f32` for
//! training and inference and in `f64` for finite-difference certification.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Element type of a tensor.
pub trait Scalar:
    Copy + Debug + Default + PartialEq + PartialOrd + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// (N, C, H, W).
pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        let numel = dims.iter().product::<usize>();
        if data.len() != numel {
            return Err(Error::Shape {
                op: "tensor",
                axis: "data length",
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::ZERO)
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(Dims) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f([ni, ci, hi, wi]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// A 1×1×1×1 tensor.
    pub fn scalar(v: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [n, c, h, w]: Dims) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, idx: Dims) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: Dims, v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous H×W plane of item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Per-item sums, accumulated in f64.
    pub fn item_sums(&self) -> Vec<f64> {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        if per == 0 {
            return vec![0.0; self.dims[0]];
        }
        self.data
            .chunks(per)
            .map(|c| c.iter().map(|v| v.to_f64()).sum())
            .collect()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Item `n` as a 1×C×H×W tensor.
    pub fn item(&self, n: usize) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks 1×C×H×W items along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            for (axis, i) in [("C", 1), ("H", 2), ("W", 3)] {
                if t.dims[i] != first.dims[i] {
                    return Err(Error::Shape {
                        op: "stack",
                        axis,
                        expected: first.dims[i],
                        got: t.dims[i],
                    });
                }
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            dims: [n, c, h, w],
            data,
        })
    }
}

pub(crate) fn same_dims(op: &'static str, a: Dims, b: Dims) -> Result<()> {
    for (i, axis) in ["N", "C", "H", "W"].into_iter().enumerate() {
        if a[i] != b[i] {
            return Err(Error::Shape {
                op,
                axis,
                expected: a[i],
                got: b[i],
            });
        }
    }
    Ok(())
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.check_finite("relu")?;
    Ok(input.map(|v| if v > T::ZERO { v } else { T::ZERO }))
}

pub fn scale<T: Scalar>(input: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if !lambda.is_finite() {
        return Err(Error::NonFinite { op: "scale" });
    }
    input.check_finite("scale")?;
    Ok(input.map(|v| T::from_f64(v.to_f64() * lambda)))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("add", a.dims, b.dims)?;
    a.check_finite("add")?;
    b.check_finite("add")?;
    Ok(Tensor {
        dims: a.dims,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect(),
    })
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    for (i, axis) in [(0, "N"), (2, "H"), (3, "W")] {
        if a.dims[i] != b.dims[i] {
            return Err(Error::Shape {
                op: "concat_channels",
                axis,
                expected: a.dims[i],
                got: b.dims[i],
            });
        }
    }
    a.check_finite("concat_channels")?;
    b.check_finite("concat_channels")?;
    let [n, ca, h, w] = a.dims;
    let cb = b.dims[1];
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (pa + pb));
    for ni in 0..n {
        data.extend_from_slice(&a.data[ni * pa..(ni + 1) * pa]);
        data.extend_from_slice(&b.data[ni * pb..(ni + 1) * pb]);
    }
    Ok(Tensor {
        dims: [n, ca + cb, h, w],
        data,
    })
}

/// Channels `[start, end)` of `input`.
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims;
    if start > end || end > c {
        return Err(Error::Shape {
            op: "slice_channels",
            axis: "C",
            expected: c,
            got: end,
        });
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (end - start) * hw);
    for ni in 0..n {
        let base = ni * c * hw;
        data.extend_from_slice(&input.data[base + start * hw..base + end * hw]);
    }
    Ok(Tensor {
        dims: [n, end - start, h, w],
        data,
    })
}
