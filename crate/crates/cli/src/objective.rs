//! Joint objective assembly: source cross-entropy on the source head plus
//! the entropy penalty on the target head plus the (tensor-fused or
//! per-layer) MMD penalty, with gradients staged into the network.
//!
//! One forward pass runs on the concatenated source+target batch; each loss
//! term contributes upstream gradients only on its own rows, and a single
//! backward pass distributes everything through the shortcut, the residual
//! path, and the feature stack.

use rtn_core::data::DomainBatch;
use rtn_core::layers::{cross_entropy, cross_entropy_grad, HeadOutputs, Network, UpstreamGrads};
use rtn_core::losses::{
    entropy_penalty, entropy_penalty_grad, fuse, fuse_backward_pair, mmd2_grad,
    mmd2_linear_with_bandwidth, mmd2_quadratic_with_bandwidth, FusedFeatures,
};
use rtn_core::tensor::Tensor;
use rtn_core::{Error, Result};

use crate::config::TrainConfig;

/// Loss components of one objective evaluation. `mmd` and `entropy` are the
/// raw (unweighted) term values; terms gated off by the variant are zero.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub source_ce: f64,
    pub mmd: f64,
    pub entropy: f64,
    /// Resolved kernel bandwidths (one for the fused penalty, two for the
    /// per-layer baseline), in evaluation order.
    pub bandwidths: Vec<f64>,
    /// How many of those came from the degenerate-median fallback.
    pub bandwidth_fallbacks: usize,
}

fn concat_forward(net: &mut Network, batch: &DomainBatch) -> Result<(HeadOutputs, usize, usize)> {
    let n_s = batch.source_x.rows();
    let n_t = batch.target_x.rows();
    if n_s != n_t {
        return Err(Error::ShapeMismatch {
            op: "objective",
            left: vec![n_s],
            right: vec![n_t],
        });
    }
    let x = batch.source_x.vstack(&batch.target_x)?;
    let out = net.forward_cached(&x)?;
    Ok((out, n_s, n_t))
}

/// Stack a source-rows block over a target-rows block, scaling both; `None`
/// blocks are zeros. Output shape is `[rows(top) + rows(bottom), cols]`.
fn stack_scaled(
    top: Option<&Tensor>,
    bottom: Option<&Tensor>,
    n_top: usize,
    n_bottom: usize,
    cols: usize,
    scale: f64,
) -> Tensor {
    let mut data = vec![0.0; (n_top + n_bottom) * cols];
    if let Some(t) = top {
        for i in 0..n_top {
            for j in 0..cols {
                data[i * cols + j] = scale * t.get(i, j);
            }
        }
    }
    if let Some(b) = bottom {
        for i in 0..n_bottom {
            for j in 0..cols {
                data[(n_top + i) * cols + j] = scale * b.get(i, j);
            }
        }
    }
    Tensor::new(vec![n_top + n_bottom, cols], data).expect("finite scatter")
}

/// Evaluate the gated objective and stage gradients for every parameter.
/// Dispatches to the per-layer MMD baseline when the variant asks for it.
pub fn objective(
    net: &mut Network,
    batch: &DomainBatch,
    cfg: &TrainConfig,
) -> Result<ObjectiveOutput> {
    assemble(net, batch, cfg, cfg.variant.per_layer_mmd())
}

/// The multiple-penalty baseline: one MMD per adapted layer (bottleneck and
/// classifier scores), each with its own bandwidth, instead of one fused
/// penalty.
pub fn objective_multi_mmd(
    net: &mut Network,
    batch: &DomainBatch,
    cfg: &TrainConfig,
) -> Result<ObjectiveOutput> {
    assemble(net, batch, cfg, true)
}

fn assemble(
    net: &mut Network,
    batch: &DomainBatch,
    cfg: &TrainConfig,
    per_layer: bool,
) -> Result<ObjectiveOutput> {
    let lambda = cfg.effective_lambda();
    let gamma = cfg.effective_gamma();
    let kernel = cfg.kernel_policy.to_kernel_config();
    let estimator = cfg.estimator.to_mmd_estimator();

    let (out, n_s, n_t) = concat_forward(net, batch)?;
    let total = n_s + n_t;

    // Source cross-entropy on the source head's probability rows.
    let f_s_src = out.f_s.slice_rows(0, n_s);
    let source_ce = cross_entropy(&f_s_src, &batch.source_y)?;
    let ce_grad = cross_entropy_grad(&f_s_src, &batch.source_y)?;
    let c = out.f_s.cols();
    let mut upstream = UpstreamGrads {
        f_s: Some(stack_scaled(Some(&ce_grad), None, n_s, n_t, c, 1.0)),
        ..Default::default()
    };

    // Entropy of the target head's probability rows on target data.
    let mut entropy = 0.0;
    if gamma > 0.0 {
        let f_t_tgt = out.f_t.slice_rows(n_s, total);
        entropy = entropy_penalty(&f_t_tgt)?;
        let g = entropy_penalty_grad(&f_t_tgt)?;
        upstream.f_t = Some(stack_scaled(None, Some(&g), n_s, n_t, c, gamma));
    }

    // MMD between fused (or per-layer) features of the two domains.
    let mut mmd = 0.0;
    let mut bandwidths = Vec::new();
    let mut bandwidth_fallbacks = 0;
    if lambda > 0.0 {
        let u = &out.fcb_feats;
        let v = &out.f_big_t;
        let (us, ut) = (u.slice_rows(0, n_s), u.slice_rows(n_s, total));
        let (vs, vt) = (v.slice_rows(0, n_s), v.slice_rows(n_s, total));
        let d_b = u.cols();
        if per_layer {
            let fu_s = FusedFeatures::from_tensor(us.clone())?;
            let fu_t = FusedFeatures::from_tensor(ut.clone())?;
            let gu = mmd2_grad(&fu_s, &fu_t, &kernel, estimator)?;
            let fv_s = FusedFeatures::from_tensor(vs.clone())?;
            let fv_t = FusedFeatures::from_tensor(vt.clone())?;
            let gv = mmd2_grad(&fv_s, &fv_t, &kernel, estimator)?;
            mmd = gu.value + gv.value;
            bandwidths.push(gu.bandwidth);
            bandwidths.push(gv.bandwidth);
            bandwidth_fallbacks +=
                usize::from(gu.bandwidth_fell_back) + usize::from(gv.bandwidth_fell_back);
            upstream.fcb_feats = Some(stack_scaled(
                Some(&gu.grad_source),
                Some(&gu.grad_target),
                n_s,
                n_t,
                d_b,
                lambda,
            ));
            upstream.f_big_t = Some(stack_scaled(
                Some(&gv.grad_source),
                Some(&gv.grad_target),
                n_s,
                n_t,
                c,
                lambda,
            ));
        } else {
            let zs = fuse(&[&us, &vs])?;
            let zt = fuse(&[&ut, &vt])?;
            let g = mmd2_grad(&zs, &zt, &kernel, estimator)?;
            mmd = g.value;
            bandwidths.push(g.bandwidth);
            bandwidth_fallbacks += usize::from(g.bandwidth_fell_back);
            let (gu_s, gv_s) = fuse_backward_pair(&us, &vs, &g.grad_source)?;
            let (gu_t, gv_t) = fuse_backward_pair(&ut, &vt, &g.grad_target)?;
            upstream.fcb_feats = Some(stack_scaled(
                Some(&gu_s),
                Some(&gu_t),
                n_s,
                n_t,
                d_b,
                lambda,
            ));
            upstream.f_big_t = Some(stack_scaled(Some(&gv_s), Some(&gv_t), n_s, n_t, c, lambda));
        }
    }

    net.backward(&upstream)?;

    let loss = if lambda > 0.0 || gamma > 0.0 {
        source_ce + gamma * entropy + lambda * mmd
    } else {
        source_ce
    };
    Ok(ObjectiveOutput {
        loss,
        source_ce,
        mmd,
        entropy,
        bandwidths,
        bandwidth_fallbacks,
    })
}

/// Pure evaluation of the same objective without touching gradients or the
/// forward cache. When `frozen_bandwidths` is given, those bandwidths are
/// used instead of re-resolving the policy; finite-difference checks need
/// this so the data-dependent median does not enter the derivative.
pub fn objective_value(
    net: &Network,
    batch: &DomainBatch,
    cfg: &TrainConfig,
    frozen_bandwidths: Option<&[f64]>,
) -> Result<f64> {
    let lambda = cfg.effective_lambda();
    let gamma = cfg.effective_gamma();
    let kernel = cfg.kernel_policy.to_kernel_config();
    let per_layer = cfg.variant.per_layer_mmd();

    let n_s = batch.source_x.rows();
    let n_t = batch.target_x.rows();
    let x = batch.source_x.vstack(&batch.target_x)?;
    let out = net.forward(&x)?;
    let total = n_s + n_t;

    let f_s_src = out.f_s.slice_rows(0, n_s);
    let mut loss = cross_entropy(&f_s_src, &batch.source_y)?;

    if gamma > 0.0 {
        let f_t_tgt = out.f_t.slice_rows(n_s, total);
        loss += gamma * entropy_penalty(&f_t_tgt)?;
    }

    if lambda > 0.0 {
        let u = &out.fcb_feats;
        let v = &out.f_big_t;
        let (us, ut) = (u.slice_rows(0, n_s), u.slice_rows(n_s, total));
        let (vs, vt) = (v.slice_rows(0, n_s), v.slice_rows(n_s, total));
        let eval = |zs: &FusedFeatures, zt: &FusedFeatures, b: Option<f64>| -> Result<f64> {
            let b = match b {
                Some(b) => b,
                None => kernel.resolve(zs, zt)?.0,
            };
            Ok(match cfg.estimator {
                crate::config::Estimator::Quadratic => mmd2_quadratic_with_bandwidth(zs, zt, b),
                crate::config::Estimator::Linear => mmd2_linear_with_bandwidth(zs, zt, b),
            })
        };
        if per_layer {
            let fu_s = FusedFeatures::from_tensor(us)?;
            let fu_t = FusedFeatures::from_tensor(ut)?;
            let fv_s = FusedFeatures::from_tensor(vs)?;
            let fv_t = FusedFeatures::from_tensor(vt)?;
            let (b0, b1) = match frozen_bandwidths {
                Some(bs) if bs.len() == 2 => (Some(bs[0]), Some(bs[1])),
                Some(bs) => {
                    return Err(Error::InvalidParameter(format!(
                        "expected 2 frozen bandwidths, got {}",
                        bs.len()
                    )))
                }
                None => (None, None),
            };
            loss += lambda * (eval(&fu_s, &fu_t, b0)? + eval(&fv_s, &fv_t, b1)?);
        } else {
            let zs = fuse(&[&us, &vs])?;
            let zt = fuse(&[&ut, &vt])?;
            let b = match frozen_bandwidths {
                Some(bs) if bs.len() == 1 => Some(bs[0]),
                Some(bs) => {
                    return Err(Error::InvalidParameter(format!(
                        "expected 1 frozen bandwidth, got {}",
                        bs.len()
                    )))
                }
                None => None,
            };
            loss += lambda * eval(&zs, &zt, b)?;
        }
    }
    Ok(loss)
}
