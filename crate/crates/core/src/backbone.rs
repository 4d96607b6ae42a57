//! Four-stage depthwise-separable feature extractor with taps F1..F4.
//!
//! Each stage is a strided depthwise 3×3 conv followed by a pointwise 1×1
//! conv, each followed by ReLU. Stage `k`'s output is tap `F_k`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::params::Params;
use crate::tensor::{Scalar, Tensor};

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; STAGES],
    pub stage_strides: [usize; STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64, 128],
            stage_strides: [2, 2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::spec("backbone: in_channels must be positive"));
        }
        if self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::spec(
                "backbone: stage channels and strides must be positive",
            ));
        }
        Ok(())
    }

    /// Product of all stage strides; input sides must be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Cumulative stride at each tap.
    pub fn tap_strides(&self) -> [usize; STAGES] {
        let mut acc = 1;
        self.stage_strides.map(|s| {
            acc *= s;
            acc
        })
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::spec(format!(
                "backbone: input {h}x{w} is not divisible by the total stride {s}; \
                 pad the image to a multiple of {s}"
            )));
        }
        Ok(())
    }

    /// Spatial size of each tap for an H×W input.
    pub fn tap_sizes(&self, h: usize, w: usize) -> Result<[(usize, usize); STAGES]> {
        self.check_input(h, w)?;
        Ok(self.tap_strides().map(|s| (h / s, w / s)))
    }

    /// `(depthwise, pointwise)` layer names and specs per stage.
    pub fn stage_layers(&self, stage: usize) -> [(String, ConvSpec); 2] {
        let cin = if stage == 0 {
            self.in_channels
        } else {
            self.stage_channels[stage - 1]
        };
        let cout = self.stage_channels[stage];
        let s = self.stage_strides[stage];
        let dw = ConvSpec {
            in_channels: cin,
            out_channels: cin,
            kernel: (3, 3),
            stride: (s, s),
            padding: (1, 1),
            dilation: (1, 1),
            depthwise: true,
            has_bias: false,
        };
        let pw = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            depthwise: false,
            has_bias: true,
        };
        [
            (format!("backbone.stage{}.dw", stage + 1), dw),
            (format!("backbone.stage{}.pw", stage + 1), pw),
        ]
    }

    pub fn layers(&self) -> Vec<(String, ConvSpec)> {
        (0..STAGES).flat_map(|k| self.stage_layers(k)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, s)| {
                let [a, b, c, d] = s.weight_dims();
                a * b * c * d + if s.has_bias { s.out_channels } else { 0 }
            })
            .sum()
    }

    pub(crate) fn init_into(&self, params: &mut Params, rng: &mut InitRng) {
        for (name, spec) in self.layers() {
            init::init_conv(params, &name, &spec, rng);
        }
    }

    /// Seeded He-normal weights and zero biases.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut params = Params::new();
        self.init_into(&mut params, &mut init::rng(seed));
        params
    }

    /// Records the four stages on `tape`, returning the taps.
    pub fn extract_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Params<T>,
        input: Var,
    ) -> Result<[Var; STAGES]> {
        self.validate()?;
        let [_, c, h, w] = tape.value(input).dims();
        if c != self.in_channels {
            return Err(Error::Shape {
                op: "backbone",
                axis: "input channels",
                expected: self.in_channels,
                got: c,
            });
        }
        self.check_input(h, w)?;
        let mut x = input;
        let mut taps = [input; STAGES];
        for (k, tap) in taps.iter_mut().enumerate() {
            for (name, spec) in self.stage_layers(k) {
                let wv = tape.param(params, &format!("{name}.weight"))?;
                let bv = if spec.has_bias {
                    Some(tape.param(params, &format!("{name}.bias"))?)
                } else {
                    None
                };
                let y = tape.conv2d(x, wv, bv, &spec)?;
                x = tape.relu(y)?;
            }
            *tap = x;
        }
        Ok(taps)
    }

    /// Feature maps F1..F4 for `input` (N, C, H, W).
    pub fn extract<T: Scalar>(&self, input: &Tensor<T>, params: &Params<T>) -> Result<[Tensor<T>; STAGES]> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone())?;
        let taps = self.extract_on(&mut tape, params, x)?;
        Ok(taps.map(|v| tape.value(v).clone()))
    }
}
