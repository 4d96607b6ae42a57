//! Pixel-wise L2 density loss, Adam with decoupled weight decay, and the
//! epoch loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::format;
use crate::network::NetworkConfig;
use crate::params::{ParamKind, Params};
use crate::prune::PruneMask;
use crate::tensor::{same_dims, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub lambda_trainable: bool,
    /// Reshuffle the sample order every epoch (seeded). Off by default.
    pub shuffle: bool,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 500,
            batch_size: 1,
            rng_seed: 0,
            lambda_trainable: false,
            shuffle: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid training configuration {self:?}")))
        }
    }

    fn trains(&self, kind: ParamKind) -> bool {
        kind != ParamKind::Lambda || self.lambda_trainable
    }
}

/// `1/(2N) * Σ (pred - gt)²` over all pixels of all N items.
pub fn l2_density_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_dims("l2_density_loss", pred.dims(), gt.dims())?;
    pred.check_finite("l2_density_loss")?;
    gt.check_finite("l2_density_loss")?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum();
    Ok(sq / (2.0 * pred.n().max(1) as f64))
}

/// Adam moments per parameter, in f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.iter().find(|m| m.0 == name).map(|m| m.1.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.iter().find(|m| m.0 == name).map(|m| m.2.as_slice())
    }
}

/// One Adam update with decoupled weight decay (`p ← p·(1 − lr·wd)` before
/// the moment step). λ multipliers are never decayed and are only updated
/// when `lambda_trainable` is set. Pruned positions in `mask` are re-zeroed
/// afterwards.
pub fn adam_step(
    params: &mut Params,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
    mask: Option<&PruneMask>,
) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = grads.param(name) {
            same_dims("adam_step", p.dims(), g.dims())?;
            if !g.all_finite() {
                return Err(Error::Numeric {
                    param: name.to_string(),
                    reason: "non-finite gradient".into(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;

    for (name, p) in params.iter_mut() {
        let kind = ParamKind::from_name(name);
        if !config.trains(kind) {
            continue;
        }
        let slot = match state.moments.iter().position(|m| m.0 == name) {
            Some(i) => i,
            None => {
                state
                    .moments
                    .push((name.to_string(), vec![0.0; p.numel()], vec![0.0; p.numel()]));
                state.moments.len() - 1
            }
        };
        let (_, m, v) = &mut state.moments[slot];
        let decay = if kind == ParamKind::Lambda {
            1.0
        } else {
            1.0 - lr * config.weight_decay
        };
        let g = grads.param(name);
        for (i, pv) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i] as f64);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let updated = (*pv as f64) * decay - lr * mhat / (vhat.sqrt() + config.epsilon);
            *pv = updated as f32;
        }
    }
    if let Some(mask) = mask {
        mask.apply(params)?;
    }
    Ok(())
}

/// One training example: a 1×C×H×W image and its 1×1×h×w target at the
/// network's output resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for periodic checkpoints (`epoch_NNNN.asfc`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Mask re-applied after every optimizer step.
    pub mask: Option<PruneMask>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<EpochLoss>,
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
}

/// Loss and gradients for one batch.
pub fn loss_and_grads(net: &NetworkConfig, params: &Params, image: &Tensor, target: &Tensor) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let x = tape.input(image.clone())?;
    let pred = net.forward_on(&mut tape, params, x)?;
    let loss = tape.l2_loss(pred, target)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward_from(loss, &Tensor::scalar(1.0))?;
    Ok((value, grads))
}

fn epoch_order(n: usize, config: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if config.shuffle {
        use rand::seq::SliceRandom;
        let mut rng = crate::init::rng(config.rng_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.asfc"))
}

/// Runs `config.epochs` passes over `dataset`:
/// forward → L2 loss → backward → Adam, logging the mean batch loss per epoch.
pub fn train(
    net: &NetworkConfig,
    params: Params,
    dataset: &[Sample],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    if dataset.is_empty() && config.epochs > 0 {
        return Err(Error::arg("training dataset is empty"));
    }
    let mut params = params;
    if let Some(mask) = &options.mask {
        mask.apply(&mut params)?;
    }
    let mut state = OptimizerState::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..config.epochs {
        let order = epoch_order(dataset.len(), config, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| dataset[i].image.clone()).collect();
            let targets: Vec<_> = chunk.iter().map(|&i| dataset[i].target.clone()).collect();
            let image = Tensor::stack(&images)?;
            let target = Tensor::stack(&targets)?;
            let diverged = |last_good: &Option<PathBuf>| Error::Diverged {
                epoch,
                last_good: last_good.clone(),
            };
            let (loss, grads) = match loss_and_grads(net, &params, &image, &target) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => return Err(diverged(&last_good)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(&last_good));
            }
            match adam_step(&mut params, &grads, &mut state, config, options.mask.as_ref()) {
                Ok(()) => {}
                Err(e) if e.is_numeric() => return Err(diverged(&last_good)),
                Err(e) => return Err(e),
            }
            total += loss;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        if !mean_loss.is_finite() || !params.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Diverged { epoch, last_good });
        }
        log.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss,
        });
        if let Some(dir) = &options.checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                let path = checkpoint_path(dir, epoch + 1);
                format::write_checkpoint(&path, &params, options.mask.as_ref())?;
                last_good = Some(path.clone());
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        checkpoints,
        steps: state.step,
    })
}

/// `epoch,mean_loss` CSV.
pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for e in log {
        s.push_str(&format!("{},{:e}\n", e.epoch, e.mean_loss));
    }
    s
}
