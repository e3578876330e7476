//! Whole-objective gradient verification: analytic gradients of the joint
//! loss against central finite differences, for every parameter tensor of a
//! small randomly built network, across every variant.
//!
//! The kernel bandwidth resolved during the analytic pass is frozen for the
//! finite-difference evaluations; the median heuristic is a data statistic
//! and deliberately carries no gradient, so differentiating through it would
//! check the wrong objective.

use serde::{Deserialize, Serialize};

use rtn_core::data::DomainBatch;
use rtn_core::layers::{Network, NetworkShape};
use rtn_core::optim::Parameters;
use rtn_core::rng::Rng;
use rtn_core::tensor::Tensor;
use rtn_core::Result;

use crate::config::{TrainConfig, Variant};
use crate::objective::{objective, objective_value};

/// Tolerance every parameter must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Test-only fault injection: added to one analytic gradient entry
    /// before comparison, to prove the check can fail.
    pub corruption: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 1234,
            corruption: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub variant: String,
    pub parameter: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn tiny_cfg(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        seed,
        feature_widths: vec![6],
        bottleneck: 4,
        classes: 3,
        batch_size: 4,
        total_steps: 1,
        ..TrainConfig::default()
    }
}

fn random_batch(rng: &mut Rng, n: usize, d: usize, c: usize) -> DomainBatch {
    let draw = |rng: &mut Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
    };
    DomainBatch {
        source_x: Tensor::new(vec![n, d], draw(rng, n * d)).expect("finite"),
        source_y: (0..n).map(|_| rng.next_below(c)).collect(),
        target_x: Tensor::new(vec![n, d], draw(rng, n * d)).expect("finite"),
    }
}

/// Check one variant; returns per-parameter max relative errors.
fn check_variant(
    variant: Variant,
    check: &GradcheckConfig,
    corrupt_here: bool,
) -> Result<Vec<GradcheckEntry>> {
    let cfg = tiny_cfg(variant, check.seed);
    let mut rng = Rng::new(check.seed);
    let mut net_rng = rng.fork();
    let shape = NetworkShape {
        input_dim: 5,
        feature_widths: cfg.feature_widths.clone(),
        bottleneck: cfg.bottleneck,
        classes: cfg.classes,
    };
    let mut net = Network::new(&shape, variant.flags(), &mut net_rng)?;
    let batch = random_batch(&mut rng, cfg.batch_size, 5, cfg.classes);

    let staged = objective(&mut net, &batch, &cfg)?;
    let frozen = if staged.bandwidths.is_empty() {
        None
    } else {
        Some(staged.bandwidths.clone())
    };

    let mut analytic: Vec<(String, Vec<f64>)> = net
        .layers()
        .iter()
        .flat_map(|l| {
            vec![
                (format!("{}.weight", l.name), l.weight_grad.data().to_vec()),
                (format!("{}.bias", l.name), l.bias_grad.data().to_vec()),
            ]
        })
        .collect();
    if corrupt_here {
        if let Some(delta) = check.corruption {
            analytic[0].1[0] += delta;
        }
    }

    let mut entries = Vec::with_capacity(analytic.len());
    for (name, grads) in &analytic {
        let mut worst = 0.0f64;
        for (k, &an) in grads.iter().enumerate() {
            let orig = {
                let slots = net.param_slots();
                slots.iter().find(|s| s.name == *name).unwrap().data[k]
            };
            let h = 1e-5 * orig.abs().max(1.0);
            let mut eval_at = |v: f64| -> Result<f64> {
                {
                    let mut slots = net.param_slots();
                    slots.iter_mut().find(|s| s.name == *name).unwrap().data[k] = v;
                }
                objective_value(&net, &batch, &cfg, frozen.as_deref())
            };
            let fp = eval_at(orig + h)?;
            let fm = eval_at(orig - h)?;
            eval_at(orig)?;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
        entries.push(GradcheckEntry {
            variant: variant.to_string(),
            parameter: name.clone(),
            max_rel_err: worst,
        });
    }
    Ok(entries)
}

/// Run the gradient check for every variant of the joint objective on a
/// small network built from the config seed.
pub fn run_gradcheck(check: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        // Fault injection, when requested, hits the first variant only.
        entries.extend(check_variant(variant, check, i == 0)?);
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_err,
        tolerance: GRADCHECK_TOLERANCE,
        passed: max_rel_err <= GRADCHECK_TOLERANCE,
        entries,
    })
}
