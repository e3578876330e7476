//! Datasets for unsupervised adaptation: labeled source examples plus
//! unlabeled target examples, with target labels held out for evaluation
//! only. Training code receives a [`TrainView`] that physically omits the
//! evaluation labels, so the protocol is enforced by the API surface rather
//! than by convention.

mod io;
mod synthetic;

pub use io::{export_csv, load_features_csv, load_manifest, write_manifest, Manifest};
pub use synthetic::{
    conditional_rule_label, covariate_class_means, gen_conditional_shift, gen_covariate_shift,
    ShiftFamily, ShiftSpec, CLUSTER_RADIUS,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Where a dataset came from, echoed into reports.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(ShiftSpec),
    Files { manifest: String },
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    source_x: Tensor,
    source_y: Vec<usize>,
    target_x: Tensor,
    target_y_eval: Option<Vec<usize>>,
    classes: usize,
    dim: usize,
    provenance: Provenance,
}

impl DomainDataset {
    pub fn new(
        source_x: Tensor,
        source_y: Vec<usize>,
        target_x: Tensor,
        target_y_eval: Option<Vec<usize>>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if !source_x.is_matrix() || !target_x.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "DomainDataset::new",
                left: source_x.shape().to_vec(),
                right: target_x.shape().to_vec(),
            });
        }
        let dim = source_x.cols();
        if target_x.cols() != dim {
            return Err(Error::ShapeMismatch {
                op: "DomainDataset::new",
                left: vec![source_x.rows(), dim],
                right: vec![target_x.rows(), target_x.cols()],
            });
        }
        if source_y.len() != source_x.rows() {
            return Err(Error::Validation(format!(
                "{} source labels for {} source rows",
                source_y.len(),
                source_x.rows()
            )));
        }
        if let Some(y) = &target_y_eval {
            if y.len() != target_x.rows() {
                return Err(Error::Validation(format!(
                    "{} eval labels for {} target rows",
                    y.len(),
                    target_x.rows()
                )));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
                return Err(Error::IndexOutOfRange(format!(
                    "target eval label {bad} exceeds class count {classes}"
                )));
            }
        }
        if let Some(&bad) = source_y.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange(format!(
                "source label {bad} exceeds class count {classes}"
            )));
        }
        Ok(DomainDataset {
            source_x,
            source_y,
            target_x,
            target_y_eval,
            classes,
            dim,
            provenance,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_source(&self) -> usize {
        self.source_x.rows()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.rows()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// The training-visible slice of the dataset: no evaluation labels.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            source_x: &self.source_x,
            source_y: &self.source_y,
            target_x: &self.target_x,
        }
    }

    /// Held-out target labels; errors when evaluation is disabled.
    pub fn eval_labels(&self) -> Result<&[usize]> {
        self.target_y_eval
            .as_deref()
            .ok_or_else(|| Error::Configuration("dataset has no evaluation labels".into()))
    }

    pub fn has_eval_labels(&self) -> bool {
        self.target_y_eval.is_some()
    }

    pub fn source_x(&self) -> &Tensor {
        &self.source_x
    }

    pub fn source_y(&self) -> &[usize] {
        &self.source_y
    }

    pub fn target_x(&self) -> &Tensor {
        &self.target_x
    }

    pub(crate) fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }
}

/// The slice of a dataset that training is allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub source_x: &'a Tensor,
    pub source_y: &'a [usize],
    pub target_x: &'a Tensor,
}

/// Paired mini-batch: labeled source rows and an equal count of unlabeled
/// target rows.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.source_x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Epoch-based batch stream. Each epoch reshuffles the source indices and
/// visits every source example at most once, dropping the last partial
/// batch; target examples are drawn from an independently reshuffled cycle.
pub struct BatchStream<'a> {
    view: TrainView<'a>,
    batch_size: usize,
    rng: Rng,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    source_pos: usize,
    target_pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(view: TrainView<'a>, batch_size: usize, rng: Rng) -> Result<Self> {
        let n_s = view.source_x.rows();
        let n_t = view.target_x.rows();
        if batch_size == 0 || batch_size > n_s.min(n_t) {
            return Err(Error::InvalidParameter(format!(
                "batch_size {batch_size} must lie in [1, min(n_s={n_s}, n_t={n_t})]"
            )));
        }
        let mut stream = BatchStream {
            view,
            batch_size,
            rng,
            source_order: (0..n_s).collect(),
            target_order: (0..n_t).collect(),
            source_pos: 0,
            target_pos: 0,
        };
        stream.reshuffle_source();
        stream.reshuffle_target();
        Ok(stream)
    }

    fn reshuffle_source(&mut self) {
        self.rng.shuffle(&mut self.source_order);
        self.source_pos = 0;
    }

    fn reshuffle_target(&mut self) {
        self.rng.shuffle(&mut self.target_order);
        self.target_pos = 0;
    }

    /// Number of batches per source epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.view.source_x.rows() / self.batch_size
    }

    /// Next paired batch; rolls into a fresh epoch when the current source
    /// pass is exhausted.
    pub fn next_batch(&mut self) -> DomainBatch {
        if self.source_pos + self.batch_size > self.source_order.len() {
            self.reshuffle_source();
        }
        if self.target_pos + self.batch_size > self.target_order.len() {
            self.reshuffle_target();
        }
        let d = self.view.source_x.cols();
        let mut sx = Vec::with_capacity(self.batch_size * d);
        let mut sy = Vec::with_capacity(self.batch_size);
        for &i in &self.source_order[self.source_pos..self.source_pos + self.batch_size] {
            sx.extend_from_slice(self.view.source_x.row(i));
            sy.push(self.view.source_y[i]);
        }
        let mut tx = Vec::with_capacity(self.batch_size * d);
        for &i in &self.target_order[self.target_pos..self.target_pos + self.batch_size] {
            tx.extend_from_slice(self.view.target_x.row(i));
        }
        self.source_pos += self.batch_size;
        self.target_pos += self.batch_size;
        DomainBatch {
            source_x: Tensor::from_parts(vec![self.batch_size, d], sx),
            source_y: sy,
            target_x: Tensor::from_parts(vec![self.batch_size, d], tx),
        }
    }

    /// Source indices of the next `count` batches, for protocol tests.
    pub fn peek_epoch_source_indices(&self) -> &[usize] {
        &self.source_order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n_s: usize, n_t: usize, d: usize, c: usize) -> DomainDataset {
        let mut rng = Rng::new(7);
        let sx = Tensor::from_parts(
            vec![n_s, d],
            (0..n_s * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let sy = (0..n_s).map(|i| i % c).collect();
        let tx = Tensor::from_parts(
            vec![n_t, d],
            (0..n_t * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let ty = (0..n_t).map(|i| i % c).collect();
        DomainDataset::new(
            sx,
            sy,
            tx,
            Some(ty),
            c,
            Provenance::Files {
                manifest: "toy".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn full_batch_contains_everything() {
        let ds = toy_dataset(6, 6, 3, 2);
        let mut stream = BatchStream::new(ds.train_view(), 6, Rng::new(1)).unwrap();
        let batch = stream.next_batch();
        assert_eq!(batch.len(), 6);
        assert_eq!(stream.batches_per_epoch(), 1);
    }

    #[test]
    fn epoch_batch_count_is_floor_division() {
        let ds = toy_dataset(100, 100, 2, 2);
        let stream = BatchStream::new(ds.train_view(), 32, Rng::new(2)).unwrap();
        assert_eq!(stream.batches_per_epoch(), 3);
    }

    #[test]
    fn no_source_index_repeats_within_an_epoch() {
        let ds = toy_dataset(50, 50, 2, 2);
        for seed in 0..10 {
            let mut stream = BatchStream::new(ds.train_view(), 16, Rng::new(seed)).unwrap();
            // 3 batches per epoch; track rows by value (rows are unique here
            // with probability 1).
            let mut seen: Vec<Vec<u64>> = Vec::new();
            for _ in 0..stream.batches_per_epoch() {
                let b = stream.next_batch();
                for i in 0..b.len() {
                    let key: Vec<u64> = b.source_x.row(i).iter().map(|v| v.to_bits()).collect();
                    assert!(!seen.contains(&key), "repeat within epoch, seed {seed}");
                    seen.push(key);
                }
            }
        }
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let ds = toy_dataset(10, 8, 2, 2);
        assert!(BatchStream::new(ds.train_view(), 9, Rng::new(0)).is_err());
        assert!(BatchStream::new(ds.train_view(), 0, Rng::new(0)).is_err());
    }

    #[test]
    fn eval_labels_error_when_absent() {
        let ds = DomainDataset::new(
            Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            vec![0],
            Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            None,
            2,
            Provenance::Files {
                manifest: "x".into(),
            },
        )
        .unwrap();
        assert!(ds.eval_labels().is_err());
        assert!(!ds.has_eval_labels());
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let r = DomainDataset::new(
            Tensor::from_rows(&[vec![0.0]]).unwrap(),
            vec![3],
            Tensor::from_rows(&[vec![0.0]]).unwrap(),
            None,
            2,
            Provenance::Files {
                manifest: "x".into(),
            },
        );
        assert!(r.is_err());
    }
}
