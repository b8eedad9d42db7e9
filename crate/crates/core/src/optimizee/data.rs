use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// A minibatch: `inputs` has one leading row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().first().copied() != Some(labels.len()) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Self { inputs, labels })
    }

    /// Placeholder batch for full-batch objectives.
    pub fn empty() -> Self {
        Self {
            inputs: Tensor::zeros(&[0]),
            labels: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Row width of `inputs`.
    pub fn row_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    /// The single-sample batch at row `i`.
    pub fn sample(&self, i: usize) -> Batch {
        let w = self.row_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = 1;
        Batch {
            inputs: Tensor::new(shape, self.inputs.data()[i * w..(i + 1) * w].to_vec()).expect("row"),
            labels: vec![self.labels[i]],
        }
    }
}

/// Labelled samples, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        Batch::new(inputs, labels).map(|b| Self {
            inputs: b.inputs,
            labels: b.labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let w: usize = self.inputs.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&self.inputs.data()[r * w..(r + 1) * w]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = rows.len();
        Batch {
            inputs: Tensor::new(shape, data).expect("rows"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Train/validation splits with seeded per-epoch reshuffling.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub train: Arc<Dataset>,
    pub validation: Arc<Dataset>,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl DatasetSource {
    pub fn new(train: Dataset, validation: Dataset, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || train.is_empty() {
            return Err(Error::InvalidArgument("dataset source needs samples and a positive batch size".into()));
        }
        Ok(Self {
            train: Arc::new(train),
            validation: Arc::new(validation),
            batch_size,
            shuffle_seed: 0,
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Same data, different shuffling stream.
    pub fn reseeded(&self, shuffle_seed: u64) -> Self {
        Self {
            shuffle_seed,
            ..self.clone()
        }
    }

    /// Training-row order for `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(self.shuffle_seed, epoch)));
        order
    }

    /// One pass over the training split; the last batch may be short.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Batch> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(|rows| self.train.batch(rows))
            .collect()
    }

    /// Endless batches over consecutive reshuffled epochs.
    pub fn stream(&self) -> impl Iterator<Item = Batch> + '_ {
        (0u64..).flat_map(move |epoch| self.epoch_batches(epoch))
    }
}

/// Gaussian blobs with unit noise, one per class; pairwise centre distance is
/// `separation` when `classes <= dim`. Split 80/20 into train and validation.
pub fn synth_classification(n: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Result<DatasetSource> {
    if classes < 2 || n < classes || dim == 0 || !(separation >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "synth_classification needs n >= classes >= 2, dim >= 1, separation >= 0 (n={n}, dim={dim}, classes={classes}, separation={separation})"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    // Gram-Schmidt on random directions; falls back to plain random unit
    // vectors once the dimension is exhausted.
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss()).collect();
        if c < dim {
            for u in &centres {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        centres.push(v);
    }
    let radius = separation / std::f64::consts::SQRT_2;

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut rng = seed::rng(seed::derive(seed, 1));
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &label in &labels {
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(radius * centres[label][j] + noise);
        }
    }
    let n_train = n * 4 / 5;
    let train = Dataset::new(Tensor::new(vec![n_train, dim], data[..n_train * dim].to_vec())?, labels[..n_train].to_vec())?;
    let validation = Dataset::new(
        Tensor::new(vec![n - n_train, dim], data[n_train * dim..].to_vec())?,
        labels[n_train..].to_vec(),
    )?;
    DatasetSource::new(train, validation, 32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_balanced_and_split_80_20() {
        let src = synth_classification(103, 4, 3, 2.0, 5).unwrap();
        assert_eq!(src.train.len(), 82);
        assert_eq!(src.validation.len(), 21);
        let mut counts = [0usize; 3];
        for &l in src.train.labels.iter().chain(&src.validation.labels) {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn identical_seed_gives_identical_bytes() {
        let a = synth_classification(50, 3, 2, 4.0, 11).unwrap();
        let b = synth_classification(50, 3, 2, 4.0, 11).unwrap();
        let bytes = |s: &DatasetSource| s.train.inputs.data().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.validation.labels, b.validation.labels);
        let c = synth_classification(50, 3, 2, 4.0, 12).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn reshuffling_preserves_the_sample_multiset() {
        let src = synth_classification(40, 2, 2, 1.0, 3).unwrap().with_batch_size(7);
        let e0 = src.epoch_order(0);
        let e1 = src.epoch_order(1);
        assert_ne!(e0, e1);
        let mut a = e0.clone();
        let mut b = e1.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let batches = src.epoch_batches(0);
        assert_eq!(batches.iter().map(Batch::size).sum::<usize>(), src.train.len());
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(synth_classification(1, 2, 2, 1.0, 0).is_err());
        assert!(synth_classification(10, 2, 2, -1.0, 0).is_err());
    }
}
