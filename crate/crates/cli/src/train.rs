//! The training loop: mini-batch SGD over paired domain batches, periodic
//! evaluation on the held-out target labels, and a machine-readable run
//! report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use rtn_core::data::{BatchStream, DomainDataset, Provenance};
use rtn_core::layers::{argmax_rows, Network, NetworkShape};
use rtn_core::optim::{SgdConfig, SgdState};
use rtn_core::rng::Rng;
use rtn_core::tensor::Tensor;
use rtn_core::{Error, Result};

use crate::config::TrainConfig;
use crate::objective::objective;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub source_ce: f64,
    pub mmd: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of absolute head activations on
/// target data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerResponse {
    pub f_t_abs: MeanStd,
    pub delta_f_abs: MeanStd,
    pub f_s_abs: MeanStd,
}

/// Full record of one training run. Serialized as `report.json`; the wall
/// clock is kept out of the JSON so identical (dataset, config, seed) runs
/// produce byte-identical reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub dataset: String,
    pub curves: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub layer_response: LayerResponse,
    pub confusion: Vec<Vec<usize>>,
    pub final_source_accuracy: f64,
    pub final_target_accuracy: f64,
    pub bandwidth_fallbacks: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn describe(provenance: &Provenance) -> String {
    match provenance {
        Provenance::Synthetic(spec) => format!(
            "synthetic {} severity {} n_s {} n_t {} dim {} classes {} noise {} seed {}",
            spec.family,
            spec.severity,
            spec.n_source,
            spec.n_target,
            spec.dim,
            spec.classes,
            spec.noise,
            spec.seed
        ),
        Provenance::Files { manifest } => format!("files {manifest}"),
    }
}

/// Source-head accuracy on labeled source rows.
pub fn source_accuracy(net: &Network, ds: &DomainDataset) -> Result<f64> {
    let out = net.forward(ds.source_x())?;
    let preds = argmax_rows(&out.f_s);
    let correct = preds
        .iter()
        .zip(ds.source_y())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Target-head confusion matrix on the held-out labels (rows = true class).
pub fn target_confusion(net: &Network, ds: &DomainDataset) -> Result<Vec<Vec<usize>>> {
    let labels = ds.eval_labels()?;
    let preds = net.predict(ds.target_x())?;
    let c = ds.classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&y, &p) in labels.iter().zip(&preds) {
        confusion[y][p] += 1;
    }
    Ok(confusion)
}

/// Accuracy as the confusion-matrix trace over the total count.
pub fn accuracy_from_confusion(confusion: &[Vec<usize>]) -> f64 {
    let trace: usize = confusion.iter().enumerate().map(|(i, row)| row[i]).sum();
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    trace as f64 / total as f64
}

/// Head-response statistics on target data.
pub fn head_response_stats(net: &Network, target_x: &Tensor) -> Result<LayerResponse> {
    let out = net.forward(target_x)?;
    let abs_stats = |t: &Tensor| -> Result<MeanStd> {
        let abs: Vec<f64> = t.data().iter().map(|v| v.abs()).collect();
        let (mean, std) = Tensor::new(vec![abs.len()], abs)?.reduce_stats()?;
        Ok(MeanStd { mean, std })
    };
    Ok(LayerResponse {
        f_t_abs: abs_stats(&out.f_big_t)?,
        delta_f_abs: abs_stats(&out.delta_f)?,
        f_s_abs: abs_stats(&out.f_big_s)?,
    })
}

/// Run `cfg.total_steps` SGD steps on the dataset and report everything.
/// Deterministic given (dataset, config): the config seed drives network
/// initialization and batch order, and evaluation touches only a frozen
/// copy of the state.
pub fn train(ds: &DomainDataset, cfg: &TrainConfig) -> Result<(Network, MetricsReport)> {
    cfg.validate()?;
    if cfg.classes != ds.classes() {
        return Err(Error::Configuration(format!(
            "config declares {} classes, dataset has {}",
            cfg.classes,
            ds.classes()
        )));
    }
    ds.eval_labels()?; // the run protocol needs held-out labels up front

    let started = Instant::now();
    let mut master = Rng::new(cfg.seed);
    let mut init_rng = master.fork();
    let batch_rng = master.fork();

    let shape = NetworkShape {
        input_dim: ds.dim(),
        feature_widths: cfg.feature_widths.clone(),
        bottleneck: cfg.bottleneck,
        classes: cfg.classes,
    };
    let mut net = Network::new(&shape, cfg.variant.flags(), &mut init_rng)?;
    let mut opt = SgdState::new(
        &mut net,
        SgdConfig {
            eta0: cfg.eta0,
            alpha: cfg.alpha,
            beta: cfg.beta,
            momentum: cfg.momentum,
            total_steps: cfg.total_steps,
        },
    )?;
    let mut stream = BatchStream::new(ds.train_view(), cfg.batch_size, batch_rng)?;

    let mut curves = Vec::with_capacity(cfg.total_steps);
    let mut evals = Vec::new();
    let mut bandwidth_fallbacks = 0usize;

    let eval_point = |net: &Network, step: usize| -> Result<EvalRecord> {
        let confusion = target_confusion(net, ds)?;
        Ok(EvalRecord {
            step,
            source_accuracy: source_accuracy(net, ds)?,
            target_accuracy: accuracy_from_confusion(&confusion),
        })
    };

    evals.push(eval_point(&net, 0)?);

    for step in 0..cfg.total_steps {
        let batch = stream.next_batch();
        let out = objective(&mut net, &batch, cfg)?;
        for (term, value) in [
            ("source_ce", out.source_ce),
            ("mmd", out.mmd),
            ("entropy", out.entropy),
            ("loss", out.loss),
        ] {
            if !value.is_finite() {
                return Err(Error::Numerical {
                    term: term.into(),
                    step,
                });
            }
        }
        bandwidth_fallbacks += out.bandwidth_fallbacks;
        curves.push(StepRecord {
            step,
            source_ce: out.source_ce,
            mmd: out.mmd,
            entropy: out.entropy,
        });
        opt.step(&mut net)?;
        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.total_steps {
            evals.push(eval_point(&net, done)?);
        }
    }

    let confusion = target_confusion(&net, ds)?;
    let final_target_accuracy = accuracy_from_confusion(&confusion);
    let final_source_accuracy = source_accuracy(&net, ds)?;
    let layer_response = head_response_stats(&net, ds.target_x())?;

    let report = MetricsReport {
        config: cfg.clone(),
        seed: cfg.seed,
        dataset: describe(ds.provenance()),
        curves,
        evals,
        layer_response,
        confusion,
        final_source_accuracy,
        final_target_accuracy,
        bandwidth_fallbacks,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use rtn_core::data::{gen_conditional_shift, gen_covariate_shift, ShiftFamily, ShiftSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 40,
            batch_size: 32,
            eval_interval: 20,
            feature_widths: vec![16],
            bottleneck: 8,
            ..TrainConfig::default()
        }
    }

    fn small_ds() -> rtn_core::data::DomainDataset {
        let mut spec = ShiftSpec::new(ShiftFamily::ConditionalBoundary, 0.5, 31);
        spec.n_source = 160;
        spec.n_target = 160;
        gen_conditional_shift(&spec).unwrap()
    }

    #[test]
    fn zero_steps_yields_initial_evaluation_only() {
        let ds = small_ds();
        let mut cfg = small_cfg();
        cfg.total_steps = 0;
        let (net, report) = train(&ds, &cfg).unwrap();
        assert!(report.curves.is_empty());
        assert_eq!(report.evals.len(), 1);
        assert_eq!(report.evals[0].step, 0);
        // Network equals its initialization: rebuild with the same seed.
        let mut master = Rng::new(cfg.seed);
        let mut init_rng = master.fork();
        let fresh = Network::new(
            &NetworkShape {
                input_dim: ds.dim(),
                feature_widths: cfg.feature_widths.clone(),
                bottleneck: cfg.bottleneck,
                classes: cfg.classes,
            },
            cfg.variant.flags(),
            &mut init_rng,
        )
        .unwrap();
        for (a, b) in net.layers().iter().zip(fresh.layers().iter()) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let ds = small_ds();
        let cfg = small_cfg();
        let (net_a, a) = train(&ds, &cfg).unwrap();
        let (net_b, b) = train(&ds, &cfg).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        // Parameter trajectories end bit-identical too.
        for (la, lb) in net_a.layers().iter().zip(net_b.layers().iter()) {
            assert_eq!(la.weight.data(), lb.weight.data());
            assert_eq!(la.bias.data(), lb.bias.data());
        }
    }

    #[test]
    fn source_only_learns_separable_source() {
        let mut spec = ShiftSpec::new(ShiftFamily::CovariateRotation, 0.4, 77);
        spec.n_source = 240;
        spec.n_target = 240;
        let ds = gen_covariate_shift(&spec).unwrap();
        let mut cfg = small_cfg();
        cfg.variant = Variant::SourceOnly;
        cfg.total_steps = 500;
        cfg.seed = 3;
        let (_, report) = train(&ds, &cfg).unwrap();
        assert!(
            report.final_source_accuracy >= 0.99,
            "source accuracy {}",
            report.final_source_accuracy
        );
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let ds = small_ds();
        let cfg = small_cfg();
        let (_, report) = train(&ds, &cfg).unwrap();
        let labels = ds.eval_labels().unwrap();
        for (k, row) in report.confusion.iter().enumerate() {
            let count = labels.iter().filter(|&&y| y == k).count();
            assert_eq!(row.iter().sum::<usize>(), count);
        }
        // Accuracy equals trace over total, exactly.
        let trace: usize = report.confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
        assert_eq!(
            report.final_target_accuracy,
            trace as f64 / labels.len() as f64
        );
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let ds = small_ds();
        let mut cfg = small_cfg();
        cfg.classes = 7;
        assert!(matches!(train(&ds, &cfg), Err(Error::Configuration(_))));
    }
}
