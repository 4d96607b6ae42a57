//! Analytic parameter and FLOP accounting. One multiply-accumulate counts as
//! two FLOPs; bias adds, ReLU and λ scaling count one per output element;
//! bicubic resize counts 16 multiplies and 15 adds per output element.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::format;
use crate::network::{LayerOp, NetworkConfig};

pub const RESIZE_FLOPS_PER_OUTPUT: u64 = 16 + 15;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub input: [usize; 3],
    pub flops_per_mac: u64,
    pub total_params: u64,
    pub total_flops: u64,
    pub layers: Vec<LayerCost>,
    /// Size of an ASFC checkpoint holding every parameter and λ.
    pub file_size_bytes: u64,
}

pub fn conv_params(spec: &ConvSpec) -> u64 {
    let [o, i, kh, kw] = spec.weight_dims();
    (o * i * kh * kw + if spec.has_bias { o } else { 0 }) as u64
}

pub fn conv_flops(spec: &ConvSpec, out_hw: (usize, usize)) -> u64 {
    let [o, i, kh, kw] = spec.weight_dims();
    let outputs = (o * out_hw.0 * out_hw.1) as u64;
    2 * (kh * kw * i) as u64 * outputs + if spec.has_bias { outputs } else { 0 }
}

/// Cost of the whole network on one `input = [C, H, W]` image.
pub fn count_cost(config: &NetworkConfig, input: [usize; 3]) -> Result<CostReport> {
    let [c, h, w] = input;
    if h == 0 || w == 0 {
        return Err(Error::arg("FLOPs need a resolved input size"));
    }
    if c != config.backbone.in_channels {
        return Err(Error::arg(format!(
            "input has {c} channels, network expects {}",
            config.backbone.in_channels
        )));
    }
    let layers: Vec<LayerCost> = config
        .trace(h, w)?
        .into_iter()
        .map(|layer| {
            let (params, flops) = match layer.op {
                LayerOp::Conv { spec, out_hw, .. } => (conv_params(&spec), conv_flops(&spec, out_hw)),
                LayerOp::Relu { channels, hw } | LayerOp::Scale { channels, hw } => {
                    (0, (channels * hw.0 * hw.1) as u64)
                }
                LayerOp::Resize { channels, out_hw } => {
                    (0, RESIZE_FLOPS_PER_OUTPUT * (channels * out_hw.0 * out_hw.1) as u64)
                }
                LayerOp::Concat { .. } => (0, 0),
            };
            LayerCost {
                name: layer.name,
                params,
                flops,
            }
        })
        .collect();
    let params = config.init_params(0);
    let file_size_bytes = 12
        + params
            .iter()
            .map(|(n, t)| 2 + n.len() + format::asft_len(t.numel()))
            .sum::<usize>();
    Ok(CostReport {
        input,
        flops_per_mac: 2,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
        file_size_bytes: file_size_bytes as u64,
    })
}

impl CostReport {
    /// Aligned text table, one row per layer plus a total.
    pub fn table(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(0)
            .max("layer".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>14}", "layer", "params", "flops");
        for l in &self.layers {
            let _ = writeln!(s, "{:<width$}  {:>10}  {:>14}", l.name, l.params, l.flops);
        }
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>14}", "total", self.total_params, self.total_flops);
        let _ = writeln!(
            s,
            "input {}x{}x{}, {} FLOPs per MAC, checkpoint {} bytes",
            self.input[0], self.input[1], self.input[2], self.flops_per_mac, self.file_size_bytes
        );
        s
    }
}
