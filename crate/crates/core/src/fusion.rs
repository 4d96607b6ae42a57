//! Adjacent-feature-fusion density head.
//!
//! ```text
//! F'_i  = resize(λ_i · relu(conv_i(F_i)))                 i = 1..4
//! M_j   = relu(conv_fuse_j(F'_a ∪ F'_b))                  (a, b) = pairing[j]
//! F_fus = relu(conv_fused(M_1 ∪ M_2))
//! f_net = relu(conv_net(F_fus))
//! D     = relu(conv_out(f_net))                           1×1 to one channel
//! ```
//!
//! Everything is resized to the spatial size of one backbone tap
//! (`target_tap`, F1 by default), so the density map is that size too.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, STAGES};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::params::Params;
use crate::tensor::{Scalar, Tensor};

/// Square stride-1 kernel with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub size: usize,
    #[serde(default = "one")]
    pub dilation: usize,
}

fn one() -> usize {
    1
}

impl KernelSpec {
    pub const fn new(size: usize, dilation: usize) -> Self {
        Self { size, dilation }
    }

    pub fn conv(&self, in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec::same(in_channels, out_channels, self.size, self.dilation)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.size == 0 || self.size.is_multiple_of(2) || self.dilation == 0 {
            return Err(Error::spec(format!(
                "fusion: {what} kernel must have an odd positive size and positive dilation, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Standard deviation of the final 1×1 density layer's initial weights.
pub const OUT_INIT_STD: f64 = 0.01;

pub const DEFAULT_LAMBDAS: [f64; 4] = [0.1, 0.1, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub branch_kernels: [KernelSpec; 4],
    pub lambdas: [f64; 4],
    /// 1-based tap indices; `[[1, 2], [3, 4]]` fuses adjacent scales.
    pub pairing: [[usize; 2]; 2],
    pub branch_out_channels: usize,
    pub net_channels: usize,
    pub fuse1_kernel: KernelSpec,
    pub fuse2_kernel: KernelSpec,
    pub fused_kernel: KernelSpec,
    pub net_kernel: KernelSpec,
    /// 1-based tap whose spatial size every branch is resized to.
    pub target_tap: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            branch_kernels: [
                KernelSpec::new(3, 2),
                KernelSpec::new(3, 1),
                KernelSpec::new(1, 1),
                KernelSpec::new(1, 1),
            ],
            lambdas: DEFAULT_LAMBDAS,
            pairing: [[1, 2], [3, 4]],
            branch_out_channels: 32,
            net_channels: 16,
            fuse1_kernel: KernelSpec::new(3, 1),
            fuse2_kernel: KernelSpec::new(1, 1),
            fused_kernel: KernelSpec::new(3, 2),
            net_kernel: KernelSpec::new(3, 1),
            target_tap: 1,
        }
    }
}

impl FusionConfig {
    /// Ablation variant with every branch multiplier fixed to 1.
    pub fn no_weights(mut self) -> Self {
        self.lambdas = [1.0; 4];
        self
    }

    pub fn with_pairing(mut self, pairing: [[usize; 2]; 2]) -> Self {
        self.pairing = pairing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for &i in self.pairing.iter().flatten() {
            if !(1..=4).contains(&i) || std::mem::replace(&mut seen[i - 1], true) {
                return Err(Error::spec(format!(
                    "fusion: pairing {:?} is not a partition of {{1,2,3,4}} into two pairs",
                    self.pairing
                )));
            }
        }
        if let Some(l) = self.lambdas.iter().find(|l| !l.is_finite()) {
            return Err(Error::spec(format!("fusion: lambda {l} is not finite")));
        }
        if self.branch_out_channels == 0 || self.net_channels == 0 {
            return Err(Error::spec("fusion: channel widths must be positive"));
        }
        if !(1..=4).contains(&self.target_tap) {
            return Err(Error::spec(format!(
                "fusion: target_tap {} is not in 1..=4",
                self.target_tap
            )));
        }
        for (i, k) in self.branch_kernels.iter().enumerate() {
            k.validate(&format!("branch {}", i + 1))?;
        }
        self.fuse1_kernel.validate("fuse1")?;
        self.fuse2_kernel.validate("fuse2")?;
        self.fused_kernel.validate("fused")?;
        self.net_kernel.validate("net")?;
        Ok(())
    }

    /// Layer names and specs of the head, in evaluation order, for a
    /// backbone with the given tap channels.
    pub fn layers(&self, tap_channels: [usize; STAGES]) -> Vec<(String, ConvSpec)> {
        let b = self.branch_out_channels;
        let mut layers: Vec<_> = (0..STAGES)
            .map(|i| {
                (
                    format!("head.branch{}", i + 1),
                    self.branch_kernels[i].conv(tap_channels[i], b),
                )
            })
            .collect();
        layers.push(("head.fuse1".into(), self.fuse1_kernel.conv(2 * b, b)));
        layers.push(("head.fuse2".into(), self.fuse2_kernel.conv(2 * b, b)));
        layers.push(("head.fused".into(), self.fused_kernel.conv(2 * b, b)));
        layers.push(("head.net".into(), self.net_kernel.conv(b, self.net_channels)));
        layers.push(("head.out".into(), ConvSpec::same(self.net_channels, 1, 1, 1)));
        layers
    }

    pub fn lambda_name(i: usize) -> String {
        format!("head.lambda{}", i + 1)
    }

    pub(crate) fn init_into(&self, tap_channels: [usize; STAGES], params: &mut Params, rng: &mut InitRng) {
        for (name, spec) in self.layers(tap_channels) {
            if name == "head.out" {
                params.insert(format!("{name}.weight"), init::normal(spec.weight_dims(), OUT_INIT_STD, rng));
                params.insert(format!("{name}.bias"), Tensor::zeros(spec.bias_dims()));
            } else {
                init::init_conv(params, &name, &spec, rng);
            }
        }
        for (i, &l) in self.lambdas.iter().enumerate() {
            params.insert(Self::lambda_name(i), Tensor::scalar(l as f32));
        }
    }

    pub fn init_params(&self, backbone: &BackboneConfig, seed: u64) -> Params {
        let mut params = Params::new();
        self.init_into(backbone.stage_channels, &mut params, &mut init::rng(seed));
        params
    }
}

fn conv_layer<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params<T>,
    name: &str,
    spec: &ConvSpec,
    x: Var,
) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), spec)
}

/// One scale branch plus the resize: `resize(λ_i · relu(conv_i(F_i)))`.
/// `i` is 0-based.
pub fn branch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params<T>,
    config: &FusionConfig,
    i: usize,
    feature: Var,
    target: (usize, usize),
) -> Result<Var> {
    if i >= STAGES {
        return Err(Error::arg(format!("branch index {i} out of range")));
    }
    let c = tape.value(feature).c();
    let spec = config.branch_kernels[i].conv(c, config.branch_out_channels);
    let y = conv_layer(tape, params, &format!("head.branch{}", i + 1), &spec, feature)?;
    let y = tape.relu(y)?;
    let lambda = tape.param(params, &FusionConfig::lambda_name(i))?;
    let y = tape.scale(y, lambda)?;
    tape.bicubic_resize(y, target.0, target.1)
}

/// `relu(conv(a ∪ b))`.
pub fn fuse_pair<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params<T>,
    name: &str,
    spec: &ConvSpec,
    a: Var,
    b: Var,
) -> Result<Var> {
    let cat = tape.concat_channels(a, b)?;
    let y = conv_layer(tape, params, name, spec, cat)?;
    tape.relu(y)
}

/// Maps taps F1..F4 to a one-channel density map at the target tap's size.
pub fn forward_head_on<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params<T>,
    config: &FusionConfig,
    taps: [Var; STAGES],
) -> Result<Var> {
    config.validate()?;
    let n = tape.value(taps[0]).n();
    for (k, &t) in taps.iter().enumerate() {
        if tape.value(t).n() != n {
            return Err(Error::Shape {
                op: "forward_head",
                axis: if k == 0 { "N" } else { "tap batch" },
                expected: n,
                got: tape.value(t).n(),
            });
        }
    }
    let tv = tape.value(taps[config.target_tap - 1]);
    let target = (tv.h(), tv.w());
    let b = config.branch_out_channels;

    let mut branches = [taps[0]; STAGES];
    for (i, slot) in branches.iter_mut().enumerate() {
        *slot = branch(tape, params, config, i, taps[i], target)?;
    }
    let [[a1, b1], [a2, b2]] = config.pairing;
    let m1 = fuse_pair(
        tape,
        params,
        "head.fuse1",
        &config.fuse1_kernel.conv(2 * b, b),
        branches[a1 - 1],
        branches[b1 - 1],
    )?;
    let m2 = fuse_pair(
        tape,
        params,
        "head.fuse2",
        &config.fuse2_kernel.conv(2 * b, b),
        branches[a2 - 1],
        branches[b2 - 1],
    )?;
    let fused = fuse_pair(
        tape,
        params,
        "head.fused",
        &config.fused_kernel.conv(2 * b, b),
        m1,
        m2,
    )?;
    let net = conv_layer(
        tape,
        params,
        "head.net",
        &config.net_kernel.conv(b, config.net_channels),
        fused,
    )?;
    let net = tape.relu(net)?;
    let out = conv_layer(
        tape,
        params,
        "head.out",
        &ConvSpec::same(config.net_channels, 1, 1, 1),
        net,
    )?;
    tape.relu(out)
}

/// Tensor-level wrapper around [`forward_head_on`].
pub fn forward_head<T: Scalar>(
    features: &[Tensor<T>; STAGES],
    config: &FusionConfig,
    params: &Params<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut taps = Vec::with_capacity(STAGES);
    for f in features {
        taps.push(tape.input(f.clone())?);
    }
    let taps: [Var; STAGES] = taps.try_into().expect("four taps");
    let out = forward_head_on(&mut tape, params, config, taps)?;
    Ok(tape.value(out).clone())
}

/// Integral of each item's density map.
pub fn predicted_count<T: Scalar>(density: &Tensor<T>) -> Vec<f64> {
    density.item_sums()
}
