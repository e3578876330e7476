//! Training configuration: hyperparameters, variant selection, and the
//! plain-text `key = value` config file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rtn_core::layers::VariantFlags;
use rtn_core::losses::{BandwidthPolicy, KernelConfig, MmdEstimator};
use rtn_core::{Error, Result};

/// Ablation variant. Each variant fixes which loss terms and which head
/// topology are active, independent of the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    Mmd,
    MultiMmd,
    MmdEnt,
    MmdEntRes,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SourceOnly,
        Variant::Mmd,
        Variant::MultiMmd,
        Variant::MmdEnt,
        Variant::MmdEntRes,
    ];

    pub fn flags(self) -> VariantFlags {
        match self {
            Variant::SourceOnly => VariantFlags {
                use_mmd: false,
                use_entropy: false,
                use_residual: false,
            },
            Variant::Mmd | Variant::MultiMmd => VariantFlags {
                use_mmd: true,
                use_entropy: false,
                use_residual: false,
            },
            Variant::MmdEnt => VariantFlags {
                use_mmd: true,
                use_entropy: true,
                use_residual: false,
            },
            Variant::MmdEntRes => VariantFlags {
                use_mmd: true,
                use_entropy: true,
                use_residual: true,
            },
        }
    }

    /// Whether the MMD penalty is the per-layer sum baseline rather than the
    /// fused-feature penalty.
    pub fn per_layer_mmd(self) -> bool {
        matches!(self, Variant::MultiMmd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::SourceOnly => "source_only",
            Variant::Mmd => "mmd",
            Variant::MultiMmd => "multi_mmd",
            Variant::MmdEnt => "mmd_ent",
            Variant::MmdEntRes => "mmd_ent_res",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Variant::SourceOnly),
            "mmd" => Ok(Variant::Mmd),
            "multi_mmd" => Ok(Variant::MultiMmd),
            "mmd_ent" => Ok(Variant::MmdEnt),
            "mmd_ent_res" => Ok(Variant::MmdEntRes),
            other => Err(Error::Configuration(format!(
                "unknown variant `{other}` (expected source_only, mmd, multi_mmd, mmd_ent, mmd_ent_res)"
            ))),
        }
    }
}

/// Kernel bandwidth policy as configured (mirrors
/// [`rtn_core::losses::BandwidthPolicy`], serializable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum KernelPolicy {
    Median,
    Fixed(f64),
}

impl KernelPolicy {
    pub fn to_kernel_config(self) -> KernelConfig {
        match self {
            KernelPolicy::Median => KernelConfig {
                policy: BandwidthPolicy::MedianPerBatch,
            },
            KernelPolicy::Fixed(b) => KernelConfig {
                policy: BandwidthPolicy::Fixed(b),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Quadratic,
    Linear,
}

impl Estimator {
    pub fn to_mmd_estimator(self) -> MmdEstimator {
        match self {
            Estimator::Quadratic => MmdEstimator::Quadratic,
            Estimator::Linear => MmdEstimator::Linear,
        }
    }
}

/// Every knob of a training run. The `variant` gates which of `lambda` and
/// `gamma` actually enter the objective; the configured values are echoed
/// into reports untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub variant: Variant,
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub momentum: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub feature_widths: Vec<usize>,
    pub bottleneck: usize,
    pub classes: usize,
    pub kernel_policy: KernelPolicy,
    pub estimator: Estimator,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            gamma: 0.3,
            variant: Variant::MmdEntRes,
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            total_steps: 2000,
            batch_size: 64,
            eval_interval: 50,
            feature_widths: vec![32, 32],
            bottleneck: 16,
            classes: 4,
            kernel_policy: KernelPolicy::Median,
            estimator: Estimator::Quadratic,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// MMD weight after variant gating.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.flags().use_mmd {
            self.lambda
        } else {
            0.0
        }
    }

    /// Entropy weight after variant gating.
    pub fn effective_gamma(&self) -> f64 {
        if self.variant.flags().use_entropy {
            self.gamma
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Configuration(format!(
                "lambda and gamma must be non-negative, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Configuration("batch_size must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Configuration(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        if self.bottleneck == 0 {
            return Err(Error::Configuration(
                "bottleneck width must be positive".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(Error::Configuration(
                "eval_interval must be positive".into(),
            ));
        }
        if let KernelPolicy::Fixed(b) = self.kernel_policy {
            if b <= 0.0 {
                return Err(Error::Configuration(format!(
                    "fixed kernel bandwidth must be positive, got {b}"
                )));
            }
        }
        if self.estimator == Estimator::Linear && self.batch_size % 2 != 0 {
            return Err(Error::Configuration(format!(
                "linear-time estimator needs an even batch size, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Parse a plain-text config file of `key = value` lines. `#` starts a
    /// comment; unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its textual form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Configuration(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "eta0" => self.eta0 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "feature_widths" => {
                self.feature_widths = value
                    .split(',')
                    .map(|v| num::<usize>(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "bottleneck" => self.bottleneck = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "kernel_policy" => {
                self.kernel_policy = if value == "median" {
                    KernelPolicy::Median
                } else if let Some(b) = value.strip_prefix("fixed:") {
                    KernelPolicy::Fixed(num(key, b.trim())?)
                } else {
                    return Err(Error::Configuration(format!(
                        "kernel_policy must be `median` or `fixed:<bandwidth>`, got `{value}`"
                    )));
                };
            }
            "estimator" => {
                self.estimator = match value {
                    "quadratic" => Estimator::Quadratic,
                    "linear" => Estimator::Linear,
                    other => {
                        return Err(Error::Configuration(format!(
                            "estimator must be `quadratic` or `linear`, got `{other}`"
                        )))
                    }
                };
            }
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown config key `{other}`"
                )));
            }
        }
        Ok(())
    }
}
