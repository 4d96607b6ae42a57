use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::ConvSpec;
use crate::params::Params;
use crate::tensor::{Dims, Tensor};

pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// N(0, 2/fan_in) draws.
pub fn he_normal(dims: Dims, fan_in: usize, rng: &mut InitRng) -> Tensor {
    normal(dims, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// N(0, std²) draws.
pub fn normal(dims: Dims, std: f64, rng: &mut InitRng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = dims.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(dims, data).expect("numel matches dims")
}

/// Adds `{prefix}.weight` (He normal) and, if the conv has one, a zero `{prefix}.bias`.
pub fn init_conv(params: &mut Params, prefix: &str, spec: &ConvSpec, rng: &mut InitRng) {
    let [_, cin, kh, kw] = spec.weight_dims();
    params.insert(
        format!("{prefix}.weight"),
        he_normal(spec.weight_dims(), cin * kh * kw, rng),
    );
    if spec.has_bias {
        params.insert(format!("{prefix}.bias"), Tensor::zeros(spec.bias_dims()));
    }
}
