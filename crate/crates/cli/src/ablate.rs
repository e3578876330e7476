//! Ablation driver: run a set of variants across seeds on identical data
//! and summarize final target accuracies per variant.

use serde::{Deserialize, Serialize};

use rtn_core::data::DomainDataset;
use rtn_core::{Error, Result};

use crate::config::{TrainConfig, Variant};
use crate::train::train;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub cells: Vec<AblationCell>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn mean_for(&self, variant: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| r.mean)
    }
}

/// Run every requested variant with every seed on the same dataset. Each run
/// copies the base config, overriding only the variant and seed.
pub fn ablate(
    ds: &DomainDataset,
    base_cfg: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter(
            "ablate needs at least one seed".into(),
        ));
    }
    if variants.is_empty() {
        return Err(Error::InvalidParameter(
            "ablate needs at least one variant".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            let (_, report) = train(ds, &cfg)?;
            cells.push(AblationCell {
                seed,
                accuracy: report.final_target_accuracy,
            });
        }
        let n = cells.len() as f64;
        let mean = cells.iter().map(|c| c.accuracy).sum::<f64>() / n;
        let var = cells
            .iter()
            .map(|c| (c.accuracy - mean) * (c.accuracy - mean))
            .sum::<f64>()
            / n;
        rows.push(AblationRow {
            variant,
            cells,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
    })
}
