//! Magnitude pruning of convolution weights. Biases and λ are never pruned.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ParamKind, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Zero the smallest-|w| individual weights of every conv tensor.
    L1Unstructured,
    /// Zero whole output channels with the smallest L2 norm.
    L2StructuredChannel,
}

impl Criterion {
    fn code(self) -> f32 {
        match self {
            Criterion::L1Unstructured => 1.0,
            Criterion::L2StructuredChannel => 2.0,
        }
    }

    fn from_code(code: f32) -> Option<Self> {
        match code {
            1.0 => Some(Criterion::L1Unstructured),
            2.0 => Some(Criterion::L2StructuredChannel),
            _ => None,
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Criterion::L1Unstructured),
            "l2" => Ok(Criterion::L2StructuredChannel),
            other => Err(Error::arg(format!("unknown criterion `{other}`, expected l1 or l2"))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::L1Unstructured => "l1",
            Criterion::L2StructuredChannel => "l2",
        })
    }
}

/// Binary keep-masks (1 = keep, 0 = pruned) for every conv weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    masks: Vec<(String, Tensor)>,
    pub criterion: Criterion,
    /// Requested fraction, stored at the precision checkpoints keep.
    pub fraction: f32,
}

/// Number of elements zeroed by unstructured pruning: ⌈fraction·n⌉.
pub fn l1_prune_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    // 0.1·30 evaluates to 3.0000000000000004; treat it as the exact product.
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Channel count whose fraction of `channels` is nearest to `fraction`, keeping
/// at least one channel. Ties go to the smaller count.
pub fn l2_prune_channels(fraction: f64, channels: usize) -> usize {
    (0..channels)
        .min_by(|&a, &b| {
            let da = (a as f64 / channels as f64 - fraction).abs();
            let db = (b as f64 / channels as f64 - fraction).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(0)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::arg(format!("prune fraction {fraction} outside [0, 1)")));
    }
    Ok(())
}

fn l1_mask(w: &Tensor, fraction: f64) -> Tensor {
    let n = w.numel();
    let k = l1_prune_count(fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the lowest flat index first among equal magnitudes.
    order.sort_by(|&a, &b| w.data()[a].abs().total_cmp(&w.data()[b].abs()));
    let mut keep = vec![1.0f32; n];
    for &i in &order[..k] {
        keep[i] = 0.0;
    }
    Tensor::new(w.dims(), keep).expect("same dims")
}

fn l2_mask(w: &Tensor, fraction: f64) -> Tensor {
    let channels = w.n();
    let per = w.numel() / channels.max(1);
    let norms: Vec<f64> = (0..channels)
        .map(|o| {
            w.data()[o * per..(o + 1) * per]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let k = l2_prune_channels(fraction, channels);
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    let mut keep = vec![1.0f32; w.numel()];
    for &o in &order[..k] {
        keep[o * per..(o + 1) * per].fill(0.0);
    }
    Tensor::new(w.dims(), keep).expect("same dims")
}

/// Prunes every conv weight tensor and returns the masked parameters.
pub fn prune(params: &Params, criterion: Criterion, fraction: f64) -> Result<(Params, PruneMask)> {
    check_fraction(fraction)?;
    let masks = params
        .iter()
        .filter(|(name, _)| ParamKind::from_name(name) == ParamKind::Weight)
        .map(|(name, w)| {
            let m = match criterion {
                Criterion::L1Unstructured => l1_mask(w, fraction),
                Criterion::L2StructuredChannel => l2_mask(w, fraction),
            };
            (name.to_string(), m)
        })
        .collect();
    let mask = PruneMask {
        masks,
        criterion,
        fraction: fraction as f32,
    };
    let mut out = params.clone();
    mask.apply(&mut out)?;
    Ok((out, mask))
}

impl PruneMask {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.masks.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Zeroes every pruned position of `params`.
    pub fn apply(&self, params: &mut Params) -> Result<()> {
        for (name, m) in &self.masks {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::arg(format!("mask for missing parameter `{name}`")))?;
            if p.dims() != m.dims() {
                return Err(Error::arg(format!(
                    "mask for `{name}` has dims {:?}, parameter has {:?}",
                    m.dims(),
                    p.dims()
                )));
            }
            for (v, &k) in p.data_mut().iter_mut().zip(m.data()) {
                if k == 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// `[criterion, fraction]` as stored alongside the masks in a checkpoint.
    pub fn meta_tensor(&self) -> Tensor {
        Tensor::new([1, 1, 1, 2], vec![self.criterion.code(), self.fraction]).expect("dims")
    }

    /// Rebuilds a mask from checkpoint entries, checking it against `params`.
    pub fn from_parts(meta: &Tensor, masks: Vec<(String, Tensor)>, params: &Params) -> Result<Self> {
        if meta.dims() != [1, 1, 1, 2] {
            return Err(Error::arg(format!("mask meta dims {:?}", meta.dims())));
        }
        let criterion = Criterion::from_code(meta.data()[0])
            .ok_or_else(|| Error::arg(format!("unknown criterion code {}", meta.data()[0])))?;
        let fraction = meta.data()[1];
        check_fraction(fraction as f64)?;
        for (name, m) in &masks {
            let p = params.require(name)?;
            if p.dims() != m.dims() {
                return Err(Error::arg(format!("mask `{name}` dims differ from parameter")));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::arg(format!("mask `{name}` is not binary")));
            }
        }
        Ok(Self {
            masks,
            criterion,
            fraction,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorSparsity {
    pub name: String,
    pub elements: usize,
    pub zeros: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    pub criterion: Criterion,
    pub fraction: f32,
    pub tensors: Vec<TensorSparsity>,
    pub elements: usize,
    pub zeros: usize,
    pub global: f64,
}

pub fn sparsity_report(mask: &PruneMask) -> SparsityReport {
    let tensors: Vec<TensorSparsity> = mask
        .iter()
        .map(|(name, m)| {
            let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
            TensorSparsity {
                name: name.to_string(),
                elements: m.numel(),
                zeros,
                sparsity: if m.numel() == 0 { 0.0 } else { zeros as f64 / m.numel() as f64 },
            }
        })
        .collect();
    let elements = tensors.iter().map(|t| t.elements).sum();
    let zeros = tensors.iter().map(|t| t.zeros).sum();
    SparsityReport {
        criterion: mask.criterion,
        fraction: mask.fraction,
        tensors,
        elements,
        zeros,
        global: if elements == 0 { 0.0 } else { zeros as f64 / elements as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, w: Tensor) -> Params {
        let mut p = Params::new();
        p.insert(name, w);
        p
    }

    #[test]
    fn l1_zeroes_smallest() {
        let p = single("c.weight", Tensor::new([1, 1, 1, 4], vec![0.1, -0.5, 0.3, -0.05]).unwrap());
        let (q, _) = prune(&p, Criterion::L1Unstructured, 0.25).unwrap();
        assert_eq!(q.get("c.weight").unwrap().data(), &[0.1, -0.5, 0.3, 0.0]);
    }

    #[test]
    fn l2_zeroes_weakest_channel() {
        let p = single("c.weight", Tensor::new([2, 1, 1, 2], vec![1.0, 1.0, 0.5, 3.0]).unwrap());
        let (q, _) = prune(&p, Criterion::L2StructuredChannel, 0.5).unwrap();
        assert_eq!(q.get("c.weight").unwrap().data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn ties_prune_lowest_index() {
        let p = single("c.weight", Tensor::full([1, 1, 1, 4], 2.0));
        let (q, _) = prune(&p, Criterion::L1Unstructured, 0.5).unwrap();
        assert_eq!(q.get("c.weight").unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let mut p = single("c.weight", Tensor::from_fn([3, 2, 1, 1], |[o, i, _, _]| (o + i) as f32 - 1.0));
        p.insert("c.bias", Tensor::full([3, 1, 1, 1], 0.0));
        for c in [Criterion::L1Unstructured, Criterion::L2StructuredChannel] {
            let (q, m) = prune(&p, c, 0.0).unwrap();
            assert_eq!(q, p);
            assert_eq!(sparsity_report(&m).global, 0.0);
        }
    }

    #[test]
    fn biases_are_never_masked() {
        let mut p = single("c.weight", Tensor::full([2, 1, 1, 1], 1.0));
        p.insert("c.bias", Tensor::full([2, 1, 1, 1], 0.0));
        let (_, m) = prune(&p, Criterion::L1Unstructured, 0.5).unwrap();
        assert!(m.get("c.bias").is_none());
    }

    #[test]
    fn fraction_out_of_range() {
        let p = single("c.weight", Tensor::full([1, 1, 1, 1], 1.0));
        assert!(prune(&p, Criterion::L1Unstructured, 1.0).is_err());
        assert!(prune(&p, Criterion::L1Unstructured, -0.1).is_err());
    }

    #[test]
    fn hundred_elements_quarter_sparsity() {
        let p = single("c.weight", Tensor::from_fn([10, 10, 1, 1], |[o, i, _, _]| (o * 10 + i) as f32));
        let (_, m) = prune(&p, Criterion::L1Unstructured, 0.25).unwrap();
        assert_eq!(sparsity_report(&m).tensors[0].sparsity, 0.25);
    }

    #[test]
    fn prune_counts() {
        assert_eq!(l1_prune_count(0.1, 30), 3);
        assert_eq!(l1_prune_count(0.25, 10), 3);
        assert_eq!(l2_prune_channels(0.25, 2), 0);
        assert_eq!(l2_prune_channels(0.9, 2), 1);
        assert_eq!(l2_prune_channels(0.25, 8), 2);
    }
}
