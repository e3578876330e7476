//! Synthetic domain-shift generators.
//!
//! Two families stress the two mismatch modes separately:
//!
//! * `CovariateRotation` - class clusters in the first two coordinates;
//!   the target domain is the same generative process rigidly rotated by the
//!   severity angle, labels traveling with their clusters. Input marginals
//!   differ, the cluster-to-label assignment is shared.
//! * `ConditionalBoundary` - source and target share the input marginal
//!   exactly; labels come from an angular-sector rule whose separating
//!   directions are rotated by the severity angle in the target domain. The
//!   shared clusters sit at the target rule's sector centers, so the
//!   low-density gaps between clusters align with the target boundaries
//!   while the source boundaries cut through cluster tails; an oracle source
//!   classifier is wrong on exactly the severity-dependent tail mass.
//!
//! Everything is a pure function of `(spec, seed)`: identical specs produce
//! bit-identical datasets.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{DomainDataset, Provenance};

/// Radius of the circle the cluster means sit on (first two coordinates).
pub const CLUSTER_RADIUS: f64 = 2.0;

/// Standard deviation of the uninformative trailing dimensions.
pub const NOISE_DIM_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftFamily {
    CovariateRotation,
    ConditionalBoundary,
}

impl std::fmt::Display for ShiftFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShiftFamily::CovariateRotation => write!(f, "covariate_rotation"),
            ShiftFamily::ConditionalBoundary => write!(f, "conditional_boundary"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub family: ShiftFamily,
    /// Rotation angle in radians (of the target inputs for the covariate
    /// family, of the target labeling rule for the conditional family).
    pub severity: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Isotropic Gaussian noise scale around cluster means and in the
    /// uninformative dimensions.
    pub noise: f64,
    /// Total feature dimension; the first two carry the class structure.
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl ShiftSpec {
    /// Desk-scale defaults: 2 informative + 8 noise dimensions, 4 classes,
    /// 800 examples per domain.
    pub fn new(family: ShiftFamily, severity: f64, seed: u64) -> Self {
        ShiftSpec {
            family,
            severity,
            n_source: 800,
            n_target: 800,
            noise: 0.4,
            dim: 10,
            classes: 4,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.severity < 0.0 || !self.severity.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "severity must be a finite non-negative angle, got {}",
                self.severity
            )));
        }
        if self.dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        if self.n_source < 2 * self.classes || self.n_target < 2 * self.classes {
            return Err(Error::InvalidParameter(format!(
                "need at least {} examples per domain for {} classes",
                2 * self.classes,
                self.classes
            )));
        }
        if self.noise <= 0.0 || !self.noise.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise must be positive, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

fn rotate2(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Per-class counts balanced within one example.
fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    let base = total / classes;
    let extra = total % classes;
    (0..classes)
        .map(|k| base + usize::from(k < extra))
        .collect()
}

/// Cluster means for the covariate family as full-dimension vectors:
/// `(source_means, target_means)` where the target means are the source
/// means rotated by the severity angle in the first two coordinates.
pub fn covariate_class_means(spec: &ShiftSpec) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut source = Vec::with_capacity(spec.classes);
    let mut target = Vec::with_capacity(spec.classes);
    for k in 0..spec.classes {
        let angle = 2.0 * PI * k as f64 / spec.classes as f64;
        let (x, y) = (CLUSTER_RADIUS * angle.cos(), CLUSTER_RADIUS * angle.sin());
        let mut m = vec![0.0; spec.dim];
        m[0] = x;
        m[1] = y;
        source.push(m);
        let (rx, ry) = rotate2(x, y, spec.severity);
        let mut t = vec![0.0; spec.dim];
        t[0] = rx;
        t[1] = ry;
        target.push(t);
    }
    (source, target)
}

fn sample_clusters(
    means: &[Vec<f64>],
    counts: &[usize],
    noise: f64,
    dim: usize,
    rng: &mut Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut xs = Vec::with_capacity(counts.iter().sum());
    let mut cluster_ids = Vec::with_capacity(xs.capacity());
    for (k, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut x = Vec::with_capacity(dim);
            for j in 0..dim {
                let sd = if j < 2 { noise } else { NOISE_DIM_SCALE };
                x.push(means[k][j] + sd * rng.normal());
            }
            xs.push(x);
            cluster_ids.push(k);
        }
    }
    (xs, cluster_ids)
}

/// Feature-distribution shift: target clusters rotated, labels shared with
/// their clusters. Labels are exactly balanced within one example per class.
pub fn gen_covariate_shift(spec: &ShiftSpec) -> Result<DomainDataset> {
    spec.validate()?;
    if spec.family != ShiftFamily::CovariateRotation {
        return Err(Error::InvalidParameter(format!(
            "gen_covariate_shift called with family {}",
            spec.family
        )));
    }
    let mut master = Rng::new(spec.seed);
    let mut src_rng = master.fork();
    let mut tgt_rng = master.fork();

    let (source_means, target_means) = covariate_class_means(spec);
    let (sx, sy) = sample_clusters(
        &source_means,
        &balanced_counts(spec.n_source, spec.classes),
        spec.noise,
        spec.dim,
        &mut src_rng,
    );
    let (tx, ty) = sample_clusters(
        &target_means,
        &balanced_counts(spec.n_target, spec.classes),
        spec.noise,
        spec.dim,
        &mut tgt_rng,
    );
    DomainDataset::new(
        Tensor::from_rows(&sx)?,
        sy,
        Tensor::from_rows(&tx)?,
        Some(ty),
        spec.classes,
        Provenance::Synthetic(spec.clone()),
    )
}

/// Label of the angular-sector rule with its separating directions rotated
/// by `rotation`: the sector whose center `2*pi*k/classes + rotation` is
/// nearest in angle to `(x0, x1)`.
pub fn conditional_rule_label(classes: usize, rotation: f64, x0: f64, x1: f64) -> usize {
    let sector = 2.0 * PI / classes as f64;
    let mut angle = (x1.atan2(x0) - rotation).rem_euclid(2.0 * PI);
    // Shift boundaries to sector edges: centers at k*sector.
    angle = (angle + sector / 2.0).rem_euclid(2.0 * PI);
    let k = (angle / sector).floor() as usize;
    k.min(classes - 1)
}

/// Classifier shift with a shared input marginal: both domains draw the same
/// cluster mixture; source labels come from the base sector rule, target
/// labels from the rule rotated by the severity angle.
pub fn gen_conditional_shift(spec: &ShiftSpec) -> Result<DomainDataset> {
    spec.validate()?;
    if spec.family != ShiftFamily::ConditionalBoundary {
        return Err(Error::InvalidParameter(format!(
            "gen_conditional_shift called with family {}",
            spec.family
        )));
    }
    let mut master = Rng::new(spec.seed);
    let mut src_rng = master.fork();
    let mut tgt_rng = master.fork();

    // Shared marginal: clusters centered mid-sector under the *target* rule.
    let mut means = Vec::with_capacity(spec.classes);
    for k in 0..spec.classes {
        let angle = 2.0 * PI * k as f64 / spec.classes as f64 + spec.severity;
        let mut m = vec![0.0; spec.dim];
        m[0] = CLUSTER_RADIUS * angle.cos();
        m[1] = CLUSTER_RADIUS * angle.sin();
        means.push(m);
    }
    let label_source = |x: &[f64]| conditional_rule_label(spec.classes, 0.0, x[0], x[1]);
    let label_target = |x: &[f64]| conditional_rule_label(spec.classes, spec.severity, x[0], x[1]);

    let (sx, _) = sample_clusters(
        &means,
        &balanced_counts(spec.n_source, spec.classes),
        spec.noise,
        spec.dim,
        &mut src_rng,
    );
    let sy: Vec<usize> = sx.iter().map(|x| label_source(x)).collect();
    let (tx, _) = sample_clusters(
        &means,
        &balanced_counts(spec.n_target, spec.classes),
        spec.noise,
        spec.dim,
        &mut tgt_rng,
    );
    let ty: Vec<usize> = tx.iter().map(|x| label_target(x)).collect();

    DomainDataset::new(
        Tensor::from_rows(&sx)?,
        sy,
        Tensor::from_rows(&tx)?,
        Some(ty),
        spec.classes,
        Provenance::Synthetic(spec.clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: ShiftFamily, severity: f64) -> ShiftSpec {
        ShiftSpec::new(family, severity, 12345)
    }

    #[test]
    fn covariate_determinism() {
        let s = spec(ShiftFamily::CovariateRotation, 0.5);
        let a = gen_covariate_shift(&s).unwrap();
        let b = gen_covariate_shift(&s).unwrap();
        assert_eq!(a.source_x().data(), b.source_x().data());
        assert_eq!(a.target_x().data(), b.target_x().data());
        assert_eq!(a.source_y(), b.source_y());
        assert_eq!(a.eval_labels().unwrap(), b.eval_labels().unwrap());
    }

    #[test]
    fn covariate_label_balance_within_one() {
        let mut s = spec(ShiftFamily::CovariateRotation, 0.3);
        s.n_source = 803; // not divisible by 4
        let ds = gen_covariate_shift(&s).unwrap();
        let mut counts = vec![0usize; s.classes];
        for &y in ds.source_y() {
            counts[y] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn covariate_zero_severity_matches_in_distribution() {
        let s = spec(ShiftFamily::CovariateRotation, 0.0);
        let ds = gen_covariate_shift(&s).unwrap();
        let d = s.dim;
        let (n_s, n_t) = (ds.n_source() as f64, ds.n_target() as f64);
        let mut mean_s = vec![0.0; d];
        let mut mean_t = vec![0.0; d];
        for i in 0..ds.n_source() {
            for j in 0..d {
                mean_s[j] += ds.source_x().get(i, j) / n_s;
            }
        }
        for i in 0..ds.n_target() {
            for j in 0..d {
                mean_t[j] += ds.target_x().get(i, j) / n_t;
            }
        }
        // Per-coordinate empirical variances give the scale of the expected
        // mean difference; the norm bound is 3x its root expected square.
        let mut expected_sq = 0.0;
        for j in 0..d {
            let var = |x: &Tensor, mean: f64, n: f64| {
                (0..x.rows())
                    .map(|i| (x.get(i, j) - mean).powi(2))
                    .sum::<f64>()
                    / n
            };
            expected_sq +=
                var(ds.source_x(), mean_s[j], n_s) / n_s + var(ds.target_x(), mean_t[j], n_t) / n_t;
        }
        let diff_sq: f64 = mean_s
            .iter()
            .zip(&mean_t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(
            diff_sq.sqrt() <= 3.0 * expected_sq.sqrt(),
            "mean gap {} vs bound {}",
            diff_sq.sqrt(),
            3.0 * expected_sq.sqrt()
        );
    }

    #[test]
    fn covariate_half_turn_negates_means() {
        let s = spec(ShiftFamily::CovariateRotation, PI);
        let (src, tgt) = covariate_class_means(&s);
        for (sm, tm) in src.iter().zip(&tgt) {
            // Rotation by pi is negation in the informative plane, up to the
            // rounding of sin(pi).
            assert!((tm[0] + sm[0]).abs() <= 1e-12 * CLUSTER_RADIUS);
            assert!((tm[1] + sm[1]).abs() <= 1e-12 * CLUSTER_RADIUS);
            // And the generator applies exactly this rotation.
            let (rx, ry) = rotate2(sm[0], sm[1], PI);
            assert_eq!(tm[0], rx);
            assert_eq!(tm[1], ry);
        }
    }

    #[test]
    fn conditional_determinism() {
        let s = spec(ShiftFamily::ConditionalBoundary, 0.6);
        let a = gen_conditional_shift(&s).unwrap();
        let b = gen_conditional_shift(&s).unwrap();
        assert_eq!(a.source_x().data(), b.source_x().data());
        assert_eq!(a.target_x().data(), b.target_x().data());
        assert_eq!(a.source_y(), b.source_y());
        assert_eq!(a.eval_labels().unwrap(), b.eval_labels().unwrap());
    }

    #[test]
    fn conditional_zero_severity_rules_agree() {
        let s = spec(ShiftFamily::ConditionalBoundary, 0.0);
        let ds = gen_conditional_shift(&s).unwrap();
        // The oracle source rule scores identically on both domains: the
        // rules coincide, so accuracy is exactly 1 on each.
        for i in 0..ds.n_source() {
            let x = ds.source_x().row(i);
            assert_eq!(
                conditional_rule_label(s.classes, 0.0, x[0], x[1]),
                ds.source_y()[i]
            );
        }
        let ty = ds.eval_labels().unwrap();
        for i in 0..ds.n_target() {
            let x = ds.target_x().row(i);
            assert_eq!(conditional_rule_label(s.classes, 0.0, x[0], x[1]), ty[i]);
        }
    }

    #[test]
    fn conditional_flip_fraction_matches_wedge_area() {
        // Rule disagreement on an isotropic sample equals the rotated wedge
        // mass: classes * severity / (2 pi).
        let classes = 4;
        let severity = 0.6;
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut flips = 0usize;
        for _ in 0..n {
            let (x0, x1) = (rng.normal(), rng.normal());
            let a = conditional_rule_label(classes, 0.0, x0, x1);
            let b = conditional_rule_label(classes, severity, x0, x1);
            if a != b {
                flips += 1;
            }
        }
        let measured = flips as f64 / n as f64;
        let analytic = classes as f64 * severity / (2.0 * PI);
        assert!(
            (measured - analytic).abs() <= 0.01,
            "measured {measured}, analytic {analytic}"
        );
    }

    #[test]
    fn conditional_cluster_allocation_is_balanced() {
        let mut s = spec(ShiftFamily::ConditionalBoundary, 0.5);
        s.n_target = 801;
        let counts = balanced_counts(s.n_target, s.classes);
        assert_eq!(counts.iter().sum::<usize>(), 801);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rule_label_sectors_are_correct() {
        // 4 sectors with centers at 0, 90, 180, 270 degrees.
        assert_eq!(conditional_rule_label(4, 0.0, 1.0, 0.0), 0);
        assert_eq!(conditional_rule_label(4, 0.0, 0.0, 1.0), 1);
        assert_eq!(conditional_rule_label(4, 0.0, -1.0, 0.0), 2);
        assert_eq!(conditional_rule_label(4, 0.0, 0.0, -1.0), 3);
        // Rotating the rule by 90 degrees relabels the x axis point.
        assert_eq!(conditional_rule_label(4, PI / 2.0, 0.0, 1.0), 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(ShiftFamily::CovariateRotation, -1.0);
        assert!(gen_covariate_shift(&s).is_err());
        s.severity = 0.5;
        s.dim = 1;
        assert!(gen_covariate_shift(&s).is_err());
        s.dim = 10;
        s.n_source = 3;
        assert!(gen_covariate_shift(&s).is_err());
        let wrong = spec(ShiftFamily::ConditionalBoundary, 0.5);
        assert!(gen_covariate_shift(&wrong).is_err());
    }
}
