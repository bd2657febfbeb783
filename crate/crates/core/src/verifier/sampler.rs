//! Class-balancing minibatch sampler.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{DatasetManifest, Label, Split};
use crate::error::{Error, Result};

/// Draws minibatches over a labeled pool.
///
/// In weighted mode every sample is drawn with replacement with probability
/// inversely proportional to its class frequency, so each class contributes
/// half of every batch in expectation. Otherwise an epoch is a plain shuffle.
/// Each epoch has its own generator derived from `(seed, epoch)`, so a
/// resumed run sees the same batches as an uninterrupted one.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    labels: Vec<Label>,
    batch_size: usize,
    seed: u64,
    weighted: bool,
    weights: Vec<f64>,
}

impl BalancedSampler {
    pub fn new(labels: Vec<Label>, batch_size: usize, seed: u64, weighted: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let pos = labels.iter().filter(|l| **l == Label::Positive).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Precondition(format!(
                "sampler needs both classes, got {pos} positive and {neg} negative"
            )));
        }
        let weights = labels
            .iter()
            .map(|l| match l {
                Label::Positive => 1.0 / pos as f64,
                Label::Negative => 1.0 / neg as f64,
            })
            .collect();
        Ok(Self {
            labels,
            batch_size,
            seed,
            weighted,
            weights,
        })
    }

    /// Sampler over the train split; indices refer to train entries in
    /// manifest order.
    pub fn from_manifest(manifest: &DatasetManifest, batch_size: usize, seed: u64) -> Result<Self> {
        let labels = manifest.entries_in(Split::Train).map(|e| e.label).collect();
        Self::new(labels, batch_size, seed, true)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.batch_size)
    }

    /// Batches of sample indices for `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let n = self.labels.len();
        if self.weighted {
            let dist = WeightedIndex::new(&self.weights).expect("weights are positive");
            (0..self.batches_per_epoch())
                .map(|_| (0..self.batch_size).map(|_| dist.sample(&mut rng)).collect())
                .collect()
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
        }
    }
}
