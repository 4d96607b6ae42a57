//! Fusion-pairing and λ ablations trained and evaluated under one seed.

use serde::{Deserialize, Serialize};

use crate::dataset::evaluate;
use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::metrics::MetricReport;
use crate::network::NetworkConfig;
use crate::train::{train, Sample, TrainConfig, TrainOptions};

pub const PAIRINGS: [[[usize; 2]; 2]; 3] = [[[1, 2], [3, 4]], [[1, 3], [2, 4]], [[1, 4], [2, 3]]];

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub fusion: FusionConfig,
}

/// The three pairings with `base` λ, then adjacent pairing with every λ = 1.
pub fn variants(base: &FusionConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = PAIRINGS
        .iter()
        .map(|&p| Variant {
            name: format!("fuse({},{})+fuse({},{})", p[0][0], p[0][1], p[1][0], p[1][1]),
            fusion: base.clone().with_pairing(p),
        })
        .collect();
    out.push(Variant {
        name: "no-weights".into(),
        fusion: base.clone().with_pairing(PAIRINGS[0]).no_weights(),
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_loss: f64,
    pub report: MetricReport,
}

/// Trains each variant from `seed` on `samples` and evaluates it on the same
/// scenes against `counts`.
pub fn run_ablation(
    base: &NetworkConfig,
    samples: &[Sample],
    counts: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    variants(&base.fusion)
        .into_iter()
        .map(|v| {
            let net = NetworkConfig {
                backbone: base.backbone.clone(),
                fusion: v.fusion,
            };
            let params = net.init_params(seed);
            let outcome = train(&net, params, samples, config, &TrainOptions::default())?;
            let report = evaluate(
                &net,
                &outcome.params,
                samples.iter().map(|s| &s.image).zip(counts.iter().copied()),
            )?;
            Ok(AblationRow {
                variant: v.name,
                final_loss: outcome.log.last().map_or(f64::NAN, |e| e.mean_loss),
                report,
            })
        })
        .collect()
}
