//! Adaptation penalties: tensor-product feature fusion, Gaussian-kernel MMD
//! between fused source/target features (quadratic and linear-time
//! estimators), the median-heuristic bandwidth, and the prediction-entropy
//! penalty. Every differentiable quantity comes with its analytic gradient.
//!
//! All functions here are pure; they can run concurrently on shared inputs.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sq_dist_slices, Tensor};

/// Probability floor used inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Row-wise vectorized tensor product of per-layer features.
///
/// Row `i` of the result is the row-major flattening of
/// `outer(x_i^(0), x_i^(1), ...)` over the participating layers, so the
/// fused width is the product of the layer widths. A single layer passes
/// through unchanged.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    z: Tensor,
}

impl FusedFeatures {
    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    pub fn width(&self) -> usize {
        self.z.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.z.row(i)
    }

    /// Wrap an already-fused (or single-layer) matrix.
    pub fn from_tensor(z: Tensor) -> Result<Self> {
        if !z.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "FusedFeatures::from_tensor",
                left: z.shape().to_vec(),
                right: vec![],
            });
        }
        Ok(FusedFeatures { z })
    }
}

/// Fuse per-layer feature matrices row by row.
pub fn fuse(per_layer_feats: &[&Tensor]) -> Result<FusedFeatures> {
    if per_layer_feats.is_empty() {
        return Err(Error::EmptyInput { what: "fuse" });
    }
    let batch = per_layer_feats[0].rows();
    for t in per_layer_feats {
        if !t.is_matrix() || t.rows() != batch {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                left: per_layer_feats[0].shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    if per_layer_feats.len() == 1 {
        return Ok(FusedFeatures {
            z: per_layer_feats[0].clone(),
        });
    }
    let width: usize = per_layer_feats.iter().map(|t| t.cols()).product();
    let mut data = Vec::with_capacity(batch * width);
    let mut scratch: Vec<f64> = Vec::new();
    for i in 0..batch {
        scratch.clear();
        scratch.extend_from_slice(per_layer_feats[0].row(i));
        for t in &per_layer_feats[1..] {
            let right = t.row(i);
            let mut next = Vec::with_capacity(scratch.len() * right.len());
            for &a in &scratch {
                for &b in right {
                    next.push(a * b);
                }
            }
            scratch = next;
        }
        data.extend_from_slice(&scratch);
    }
    Ok(FusedFeatures {
        z: Tensor::new(vec![batch, width], data)?,
    })
}

/// Gradient of a scalar loss w.r.t. the two layer inputs of a two-layer
/// fusion, given the gradient w.r.t. the fused rows. Inverse of the chain
/// `z_i = outer(u_i, v_i)` flattened row-major.
pub fn fuse_backward_pair(u: &Tensor, v: &Tensor, grad_z: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, du, dv) = (u.rows(), u.cols(), v.cols());
    if grad_z.rows() != batch || grad_z.cols() != du * dv || v.rows() != batch {
        return Err(Error::ShapeMismatch {
            op: "fuse_backward_pair",
            left: vec![batch, du * dv],
            right: grad_z.shape().to_vec(),
        });
    }
    let mut gu = Tensor::zeros(vec![batch, du]);
    let mut gv = Tensor::zeros(vec![batch, dv]);
    for i in 0..batch {
        let gz = grad_z.row(i);
        let ur = u.row(i);
        let vr = v.row(i);
        for a in 0..du {
            let mut acc = 0.0;
            for b in 0..dv {
                acc += gz[a * dv + b] * vr[b];
            }
            gu.set(i, a, acc);
        }
        for b in 0..dv {
            let mut acc = 0.0;
            for a in 0..du {
                acc += gz[a * dv + b] * ur[a];
            }
            gv.set(i, b, acc);
        }
    }
    Ok((gu, gv))
}

/// Bandwidth selection policy for the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    /// Median of all pairwise squared distances over the combined
    /// source+target batch, recomputed per call.
    MedianPerBatch,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub policy: BandwidthPolicy,
}

impl KernelConfig {
    pub fn median_per_batch() -> Self {
        KernelConfig {
            policy: BandwidthPolicy::MedianPerBatch,
        }
    }

    pub fn fixed(b: f64) -> Self {
        KernelConfig {
            policy: BandwidthPolicy::Fixed(b),
        }
    }

    /// Resolve the bandwidth for a source/target pair of fused batches.
    ///
    /// Returns `(bandwidth, fell_back)`; `fell_back` is true when the median
    /// was degenerate (all rows equal) and the documented fallback b = 1 was
    /// used. Callers that log should report the fallback.
    pub fn resolve(&self, zs: &FusedFeatures, zt: &FusedFeatures) -> Result<(f64, bool)> {
        match self.policy {
            BandwidthPolicy::Fixed(b) => {
                if b <= 0.0 || !b.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "kernel bandwidth must be positive, got {b}"
                    )));
                }
                Ok((b, false))
            }
            BandwidthPolicy::MedianPerBatch => {
                let combined = zs.tensor().vstack(zt.tensor())?;
                let combined = FusedFeatures { z: combined };
                match median_heuristic(&combined) {
                    Ok(b) => Ok((b, false)),
                    Err(Error::DegenerateData(_)) => Ok((1.0, true)),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

/// Gaussian kernel `k(z, z') = exp(-||z - z'||^2 / b)` on vectorized features.
pub fn gaussian_kernel(z: &Tensor, z2: &Tensor, b: f64) -> Result<f64> {
    if b <= 0.0 || !b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "kernel bandwidth must be positive, got {b}"
        )));
    }
    let d2 = z.sq_dist(z2)?;
    Ok((-d2 / b).exp())
}

fn kernel_rows(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    (-sq_dist_slices(a, b) / bandwidth).exp()
}

/// Median of the n(n-1)/2 distinct pairwise squared distances of the rows.
/// Even count takes the mean of the two middle values.
pub fn median_heuristic(fused: &FusedFeatures) -> Result<f64> {
    let n = fused.rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "median heuristic needs at least 2 rows, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist_slices(fused.row(i), fused.row(j)));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median == 0.0 {
        return Err(Error::DegenerateData(
            "all pairwise squared distances are zero".into(),
        ));
    }
    Ok(median)
}

fn require_nonempty(zs: &FusedFeatures, zt: &FusedFeatures) -> Result<()> {
    if zs.rows() == 0 || zt.rows() == 0 {
        return Err(Error::InsufficientData(
            "mmd needs at least one row per domain".into(),
        ));
    }
    if zs.width() != zt.width() {
        return Err(Error::ShapeMismatch {
            op: "mmd2",
            left: zs.z.shape().to_vec(),
            right: zt.z.shape().to_vec(),
        });
    }
    Ok(())
}

/// Biased V-statistic estimate of squared MMD between the fused batches:
/// within-source mean kernel + within-target mean kernel - 2 cross mean.
pub fn mmd2_quadratic(zs: &FusedFeatures, zt: &FusedFeatures, cfg: &KernelConfig) -> Result<f64> {
    require_nonempty(zs, zt)?;
    let (b, _) = cfg.resolve(zs, zt)?;
    Ok(mmd2_quadratic_with_bandwidth(zs, zt, b))
}

pub fn mmd2_quadratic_with_bandwidth(zs: &FusedFeatures, zt: &FusedFeatures, b: f64) -> f64 {
    let (ns, nt) = (zs.rows(), zt.rows());
    let mut ss = 0.0;
    for i in 0..ns {
        for j in 0..ns {
            ss += kernel_rows(zs.row(i), zs.row(j), b);
        }
    }
    let mut tt = 0.0;
    for i in 0..nt {
        for j in 0..nt {
            tt += kernel_rows(zt.row(i), zt.row(j), b);
        }
    }
    let mut st = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            st += kernel_rows(zs.row(i), zt.row(j), b);
        }
    }
    ss / (ns * ns) as f64 + tt / (nt * nt) as f64 - 2.0 * st / (ns * nt) as f64
}

/// Unbiased linear-time estimator over consecutive quadruples
/// `(s_{2i}, s_{2i+1}, t_{2i}, t_{2i+1})`. Requires equal, even batch sizes;
/// may be negative.
pub fn mmd2_linear(zs: &FusedFeatures, zt: &FusedFeatures, cfg: &KernelConfig) -> Result<f64> {
    require_nonempty(zs, zt)?;
    let n = zs.rows();
    if zt.rows() != n || n % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "mmd2_linear",
            left: vec![n],
            right: vec![zt.rows()],
        });
    }
    let (b, _) = cfg.resolve(zs, zt)?;
    Ok(mmd2_linear_with_bandwidth(zs, zt, b))
}

pub fn mmd2_linear_with_bandwidth(zs: &FusedFeatures, zt: &FusedFeatures, b: f64) -> f64 {
    let n = zs.rows();
    let half = n / 2;
    let mut acc = 0.0;
    for q in 0..half {
        let (i, j) = (2 * q, 2 * q + 1);
        acc += kernel_rows(zs.row(i), zs.row(j), b);
        acc += kernel_rows(zt.row(i), zt.row(j), b);
        acc -= kernel_rows(zs.row(i), zt.row(j), b);
        acc -= kernel_rows(zs.row(j), zt.row(i), b);
    }
    acc / half as f64
}

/// Which MMD estimator drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdEstimator {
    Quadratic,
    Linear,
}

/// Value and analytic gradients of the chosen estimator w.r.t. every fused
/// feature entry. The bandwidth is resolved once and treated as a constant
/// during differentiation: the median is a data statistic, not a parameter.
#[derive(Debug, Clone)]
pub struct MmdGrad {
    pub value: f64,
    pub grad_source: Tensor,
    pub grad_target: Tensor,
    pub bandwidth: f64,
    pub bandwidth_fell_back: bool,
}

pub fn mmd2_grad(
    zs: &FusedFeatures,
    zt: &FusedFeatures,
    cfg: &KernelConfig,
    estimator: MmdEstimator,
) -> Result<MmdGrad> {
    require_nonempty(zs, zt)?;
    let (b, fell_back) = cfg.resolve(zs, zt)?;
    let (ns, nt, d) = (zs.rows(), zt.rows(), zs.width());
    let mut gs = Tensor::zeros(vec![ns, d]);
    let mut gt = Tensor::zeros(vec![nt, d]);
    let value = match estimator {
        MmdEstimator::Quadratic => {
            // d/dz_i exp(-||z_i - z_j||^2 / b) = k * (-2/b)(z_i - z_j); each
            // unordered within-domain pair appears twice in the double sum.
            let ws = 1.0 / (ns * ns) as f64;
            let wt = 1.0 / (nt * nt) as f64;
            let wst = 2.0 / (ns * nt) as f64;
            for i in 0..ns {
                for j in 0..ns {
                    if i == j {
                        continue;
                    }
                    let k = kernel_rows(zs.row(i), zs.row(j), b);
                    let coef = ws * k * (-2.0 / b);
                    for a in 0..d {
                        let diff = zs.row(i)[a] - zs.row(j)[a];
                        // i as first argument plus i as second argument of the
                        // symmetric kernel: the (j, i) term contributes the same.
                        gs.data_mut()[i * d + a] += 2.0 * coef * diff;
                    }
                }
            }
            for i in 0..nt {
                for j in 0..nt {
                    if i == j {
                        continue;
                    }
                    let k = kernel_rows(zt.row(i), zt.row(j), b);
                    let coef = wt * k * (-2.0 / b);
                    for a in 0..d {
                        let diff = zt.row(i)[a] - zt.row(j)[a];
                        gt.data_mut()[i * d + a] += 2.0 * coef * diff;
                    }
                }
            }
            for i in 0..ns {
                for j in 0..nt {
                    let k = kernel_rows(zs.row(i), zt.row(j), b);
                    let coef = -wst * k * (-2.0 / b);
                    for a in 0..d {
                        let diff = zs.row(i)[a] - zt.row(j)[a];
                        gs.data_mut()[i * d + a] += coef * diff;
                        gt.data_mut()[j * d + a] -= coef * diff;
                    }
                }
            }
            mmd2_quadratic_with_bandwidth(zs, zt, b)
        }
        MmdEstimator::Linear => {
            if nt != ns || ns % 2 != 0 {
                return Err(Error::ShapeMismatch {
                    op: "mmd2_grad(linear)",
                    left: vec![ns],
                    right: vec![nt],
                });
            }
            let half = ns / 2;
            let w = 1.0 / half as f64;
            for q in 0..half {
                let (i, j) = (2 * q, 2 * q + 1);
                // + k(s_i, s_j)
                let k = kernel_rows(zs.row(i), zs.row(j), b);
                let coef = w * k * (-2.0 / b);
                for a in 0..d {
                    let diff = zs.row(i)[a] - zs.row(j)[a];
                    gs.data_mut()[i * d + a] += coef * diff;
                    gs.data_mut()[j * d + a] -= coef * diff;
                }
                // + k(t_i, t_j)
                let k = kernel_rows(zt.row(i), zt.row(j), b);
                let coef = w * k * (-2.0 / b);
                for a in 0..d {
                    let diff = zt.row(i)[a] - zt.row(j)[a];
                    gt.data_mut()[i * d + a] += coef * diff;
                    gt.data_mut()[j * d + a] -= coef * diff;
                }
                // - k(s_i, t_j)
                let k = kernel_rows(zs.row(i), zt.row(j), b);
                let coef = -w * k * (-2.0 / b);
                for a in 0..d {
                    let diff = zs.row(i)[a] - zt.row(j)[a];
                    gs.data_mut()[i * d + a] += coef * diff;
                    gt.data_mut()[j * d + a] -= coef * diff;
                }
                // - k(s_j, t_i)
                let k = kernel_rows(zs.row(j), zt.row(i), b);
                let coef = -w * k * (-2.0 / b);
                for a in 0..d {
                    let diff = zs.row(j)[a] - zt.row(i)[a];
                    gs.data_mut()[j * d + a] += coef * diff;
                    gt.data_mut()[i * d + a] -= coef * diff;
                }
            }
            mmd2_linear_with_bandwidth(zs, zt, b)
        }
    };
    Ok(MmdGrad {
        value,
        grad_source: gs,
        grad_target: gt,
        bandwidth: b,
        bandwidth_fell_back: fell_back,
    })
}

/// Mean prediction entropy over a batch of probability rows:
/// `(1/n) sum_i -sum_j p_ij ln(max(p_ij, eps))`.
///
/// The floor applies only inside the logarithm, so one-hot rows score exactly
/// zero and uniform rows score exactly ln(c) up to rounding.
pub fn entropy_penalty(probs: &Tensor) -> Result<f64> {
    validate_prob_rows(probs)?;
    let (n, c) = (probs.rows(), probs.cols());
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..c {
            let p = probs.get(i, j);
            acc -= p * p.max(PROB_EPS).ln();
        }
    }
    Ok(acc / n as f64)
}

/// Analytic gradient of `entropy_penalty` w.r.t. each probability entry.
pub fn entropy_penalty_grad(probs: &Tensor) -> Result<Tensor> {
    validate_prob_rows(probs)?;
    let (n, c) = (probs.rows(), probs.cols());
    let mut g = Tensor::zeros(vec![n, c]);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..c {
            let p = probs.get(i, j);
            let slope = if p >= PROB_EPS {
                -(p.ln() + 1.0)
            } else {
                // Below the floor the term is linear in p with slope ln(eps).
                -PROB_EPS.ln()
            };
            g.set(i, j, slope * inv_n);
        }
    }
    Ok(g)
}

fn validate_prob_rows(probs: &Tensor) -> Result<()> {
    if !probs.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "entropy_penalty",
            left: probs.shape().to_vec(),
            right: vec![],
        });
    }
    for i in 0..probs.rows() {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "row {i} sums to {s}, expected 1 within 1e-6"
            )));
        }
    }
    Ok(())
}

/// Count-sketch projection of fused features to `target_dim`, preserving
/// inner products in expectation. When `target_dim` equals the fused width
/// the sketch degenerates to the identity. Off by default at desk scale; kept
/// selectable for high-width fusions.
pub fn sketch_compress(
    fused: &FusedFeatures,
    target_dim: usize,
    rng: &mut Rng,
) -> Result<FusedFeatures> {
    if target_dim < 1 {
        return Err(Error::InvalidParameter(
            "sketch target_dim must be at least 1".into(),
        ));
    }
    let (n, d) = (fused.rows(), fused.width());
    if target_dim == d {
        return Ok(fused.clone());
    }
    // One shared (bucket, sign) map per call, drawn from the seeded rng.
    let buckets: Vec<usize> = (0..d).map(|_| rng.next_below(target_dim)).collect();
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut out = Tensor::zeros(vec![n, target_dim]);
    for i in 0..n {
        let row = fused.row(i);
        for a in 0..d {
            out.data_mut()[i * target_dim + buckets[a]] += signs[a] * row[a];
        }
    }
    Ok(FusedFeatures { z: out })
}
