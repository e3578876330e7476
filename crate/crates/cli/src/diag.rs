//! Diagnostics mirroring the layer-response and classifier-shift analyses:
//! head activation statistics of a trained residual network, and the weight
//! divergence between softmax-regression heads fitted per domain on frozen
//! features.

use serde::{Deserialize, Serialize};

use rtn_core::data::DomainDataset;
use rtn_core::layers::{softmax, Network};
use rtn_core::rng::Rng;
use rtn_core::tensor::Tensor;
use rtn_core::{Error, Result};

use crate::config::{TrainConfig, Variant};
use crate::train::{head_response_stats, train, LayerResponse};

/// Head-response statistics for a trained network with an active residual
/// path. Refuses variants without one: there is no residual response to
/// report.
pub fn layer_response_report(net: &Network, target_x: &Tensor) -> Result<LayerResponse> {
    if !net.variant.use_residual {
        return Err(Error::Configuration(
            "layer-response report needs a variant with the residual path".into(),
        ));
    }
    head_response_stats(net, target_x)
}

/// Weight divergence between per-domain softmax-regression heads trained on
/// a frozen feature representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierShiftReport {
    /// Cosine similarity between the per-class weight vectors of the source
    /// and target heads.
    pub per_class_cosine: Vec<f64>,
    /// Frobenius norm of the weight-matrix difference between the heads.
    pub frobenius_diff: f64,
    /// Same-domain null: Frobenius difference between heads fitted on two
    /// disjoint random halves of the source set, so the yardstick carries
    /// both sampling and optimization variability.
    pub null_frobenius_diff: f64,
}

/// Plain softmax regression trained by full-batch gradient descent from a
/// small random init. Returns the `[d x c]` weight matrix.
fn fit_softmax_head(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Tensor> {
    let (n, d) = (features.rows(), features.cols());
    let mut rng = Rng::new(seed);
    let mut weight = Tensor::new(
        vec![d, classes],
        (0..d * classes).map(|_| rng.uniform(-0.01, 0.01)).collect(),
    )?;
    let mut bias = vec![0.0; classes];
    for _ in 0..steps {
        let base = features.matmul(&weight)?;
        let mut ldata = base.data().to_vec();
        for i in 0..n {
            for j in 0..classes {
                ldata[i * classes + j] += bias[j];
            }
        }
        let logits = Tensor::new(vec![n, classes], ldata)?;
        let probs = softmax(&logits);
        // d loss / d logits = (p - onehot) / n for mean cross-entropy.
        let mut g = probs.data().to_vec();
        for (i, &y) in labels.iter().enumerate() {
            g[i * classes + y] -= 1.0;
        }
        for v in g.iter_mut() {
            *v /= n as f64;
        }
        let g = Tensor::new(vec![n, classes], g)?;
        let wg = features.matmul_tn(&g)?;
        let mut wdata = weight.data().to_vec();
        for (w, gw) in wdata.iter_mut().zip(wg.data()) {
            *w -= lr * gw;
        }
        weight = Tensor::new(vec![d, classes], wdata)?;
        for j in 0..classes {
            let mut acc = 0.0;
            for i in 0..n {
                acc += g.get(i, j);
            }
            bias[j] -= lr * acc;
        }
    }
    Ok(weight)
}

fn frobenius_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity of per-class weight columns.
pub fn per_class_cosine(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (d, c) = (a.rows(), a.cols());
    (0..c)
        .map(|j| {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..d {
                dot += a.get(i, j) * b.get(i, j);
                na += a.get(i, j) * a.get(i, j);
                nb += b.get(i, j) * b.get(i, j);
            }
            dot / (na.sqrt() * nb.sqrt()).max(1e-300)
        })
        .collect()
}

const HEAD_STEPS: usize = 400;
const HEAD_LR: f64 = 0.5;

/// Train a source-only network on the dataset, freeze its features, fit one
/// softmax-regression head per domain with labels, and compare the heads.
/// The same-domain null refits the source head from a different seed.
pub fn classifier_shift_report(
    ds: &DomainDataset,
    base_cfg: &TrainConfig,
    seed: u64,
) -> Result<ClassifierShiftReport> {
    let labels_t = ds.eval_labels()?;
    let mut cfg = base_cfg.clone();
    cfg.variant = Variant::SourceOnly;
    cfg.seed = seed;
    let (net, _) = train(ds, &cfg)?;

    let embed = |x: &Tensor| -> Result<Tensor> { Ok(net.forward(x)?.fcb_feats) };
    let feats_s = embed(ds.source_x())?;
    let feats_t = embed(ds.target_x())?;
    let c = ds.classes();

    let w_s = fit_softmax_head(&feats_s, ds.source_y(), c, HEAD_STEPS, HEAD_LR, seed ^ 0xA5)?;
    let w_t = fit_softmax_head(&feats_t, labels_t, c, HEAD_STEPS, HEAD_LR, seed ^ 0x5A)?;

    // Null baseline: disjoint half-splits of the source domain.
    let n = feats_s.rows();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed ^ 0xC3).shuffle(&mut order);
    let gather = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let mut rows = Vec::with_capacity(idx.len() * feats_s.cols());
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            rows.extend_from_slice(feats_s.row(i));
            ys.push(ds.source_y()[i]);
        }
        Ok((Tensor::new(vec![idx.len(), feats_s.cols()], rows)?, ys))
    };
    let (fa, ya) = gather(&order[..n / 2])?;
    let (fb, yb) = gather(&order[n / 2..])?;
    let w_a = fit_softmax_head(&fa, &ya, c, HEAD_STEPS, HEAD_LR, seed ^ 0x11)?;
    let w_b = fit_softmax_head(&fb, &yb, c, HEAD_STEPS, HEAD_LR, seed ^ 0x22)?;

    Ok(ClassifierShiftReport {
        per_class_cosine: per_class_cosine(&w_s, &w_t),
        frobenius_diff: frobenius_diff(&w_s, &w_t),
        null_frobenius_diff: frobenius_diff(&w_a, &w_b),
    })
}
