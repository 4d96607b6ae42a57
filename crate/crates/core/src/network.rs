use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tape, Var};
use crate::backbone::{BackboneConfig, STAGES};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::init;
use crate::params::Params;
use crate::tensor::{Scalar, Tensor};

/// Backbone plus fusion head: image (N, C, H, W) → density (N, 1, H_t, W_t).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
}

/// One step of the network, with the shapes needed for cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv {
        spec: ConvSpec,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Relu {
        channels: usize,
        hw: (usize, usize),
    },
    Scale {
        channels: usize,
        hw: (usize, usize),
    },
    Resize {
        channels: usize,
        out_hw: (usize, usize),
    },
    Concat {
        channels: usize,
        hw: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()
    }

    /// All conv layers, backbone first.
    pub fn conv_layers(&self) -> Vec<(String, ConvSpec)> {
        let mut layers = self.backbone.layers();
        layers.extend(self.fusion.layers(self.backbone.stage_channels));
        layers
    }

    /// Backbone then head weights from one seeded stream; λ from the config.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut params = Params::new();
        let mut rng = init::rng(seed);
        self.backbone.init_into(&mut params, &mut rng);
        self.fusion
            .init_into(self.backbone.stage_channels, &mut params, &mut rng);
        params
    }

    /// Density-map size for an H×W input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let taps = self.backbone.tap_sizes(h, w)?;
        Ok(taps[self.fusion.target_tap - 1])
    }

    /// Records the full network on `tape`.
    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<T>, params: &Params<T>, image: Var) -> Result<Var> {
        let taps = self.backbone.extract_on(tape, params, image)?;
        fusion::forward_head_on(tape, params, &self.fusion, taps)
    }

    pub fn predict<T: Scalar>(&self, params: &Params<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(image.clone())?;
        let out = self.forward_on(&mut tape, params, x)?;
        Ok(tape.value(out).clone())
    }

    /// Every op the network executes for one H×W image, in order.
    pub fn trace(&self, h: usize, w: usize) -> Result<Vec<Layer>> {
        self.validate()?;
        let taps = self.backbone.tap_sizes(h, w)?;
        let mut out = Vec::new();
        let conv = |out: &mut Vec<Layer>, name: &str, spec: ConvSpec, in_hw: (usize, usize)| -> Result<(usize, usize)> {
            let out_hw = spec.output_size(in_hw.0, in_hw.1)?;
            out.push(Layer {
                name: name.to_string(),
                op: LayerOp::Conv { spec, in_hw, out_hw },
            });
            Ok(out_hw)
        };
        let relu = |out: &mut Vec<Layer>, name: &str, channels: usize, hw: (usize, usize)| {
            out.push(Layer {
                name: format!("{name}.relu"),
                op: LayerOp::Relu { channels, hw },
            });
        };

        let mut hw = (h, w);
        for (k, &tap) in taps.iter().enumerate().take(STAGES) {
            for (name, spec) in self.backbone.stage_layers(k) {
                hw = conv(&mut out, &name, spec, hw)?;
                relu(&mut out, &name, spec.out_channels, hw);
            }
            if hw != tap {
                return Err(Error::spec(format!(
                    "backbone stage {} produced {hw:?}, expected {tap:?}",
                    k + 1
                )));
            }
        }

        let f = &self.fusion;
        let target = taps[f.target_tap - 1];
        let b = f.branch_out_channels;
        let head = f.layers(self.backbone.stage_channels);
        for (i, (name, spec)) in head.iter().take(STAGES).enumerate() {
            let ohw = conv(&mut out, name, *spec, taps[i])?;
            relu(&mut out, name, b, ohw);
            out.push(Layer {
                name: FusionConfig::lambda_name(i),
                op: LayerOp::Scale { channels: b, hw: ohw },
            });
            out.push(Layer {
                name: format!("{name}.resize"),
                op: LayerOp::Resize {
                    channels: b,
                    out_hw: target,
                },
            });
        }
        for (name, spec) in head.iter().skip(STAGES) {
            if spec.in_channels == 2 * b {
                out.push(Layer {
                    name: format!("{name}.concat"),
                    op: LayerOp::Concat {
                        channels: 2 * b,
                        hw: target,
                    },
                });
            }
            let ohw = conv(&mut out, name, *spec, target)?;
            relu(&mut out, name, spec.out_channels, ohw);
        }
        Ok(out)
    }
}

impl<T: Scalar> Graph<T> for NetworkConfig {
    fn build(&self, tape: &mut Tape<T>, params: &Params<T>, inputs: &[Var]) -> Result<Var> {
        let image = *inputs
            .first()
            .ok_or_else(|| Error::arg("network expects one image input"))?;
        self.forward_on(tape, params, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_output_is_half_resolution() {
        let net = NetworkConfig::default();
        assert_eq!(net.output_size(64, 64).unwrap(), (32, 32));
        let params = net.init_params(0);
        let x = Tensor::from_fn([1, 3, 64, 64], |[_, c, h, w]| ((c * 5 + h * 3 + w) % 7) as f32 / 7.0);
        let d = net.predict(&params, &x).unwrap();
        assert_eq!(d.dims(), [1, 1, 32, 32]);
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_count() {
        let net = NetworkConfig::default();
        let params = net.init_params(5);
        let d = net.predict(&params, &Tensor::zeros([1, 3, 64, 64])).unwrap();
        assert_eq!(fusion::predicted_count(&d), vec![0.0]);
    }

    #[test]
    fn trace_convs_match_param_layout() {
        let net = NetworkConfig::default();
        let traced: Vec<_> = net
            .trace(64, 64)
            .unwrap()
            .into_iter()
            .filter_map(|l| match l.op {
                LayerOp::Conv { spec, .. } => Some((l.name, spec)),
                _ => None,
            })
            .collect();
        assert_eq!(traced, net.conv_layers());
    }

    #[test]
    fn head_under_100k_params() {
        let net = NetworkConfig::default();
        let params = net.init_params(0);
        let head: usize = params
            .iter()
            .filter(|(n, _)| n.starts_with("head.") && !n.contains("lambda"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(head, 63_745);
    }
}
