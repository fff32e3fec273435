use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two aligned image batches for the dual stream. Row `i` of A and row `i`
/// of B always come from different domains.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub images_a: Tensor<T>,
    pub images_b: Tensor<T>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub domains_a: Vec<usize>,
    pub domains_b: Vec<usize>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.labels_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels_a.is_empty()
    }
}

/// Per-domain index over a training set.
#[derive(Debug, Clone)]
pub struct PairSampler {
    by_domain: Vec<(usize, Vec<usize>)>,
    all: Vec<usize>,
}

impl PairSampler {
    pub fn new(train: &Dataset) -> Result<Self> {
        let by_domain: Vec<(usize, Vec<usize>)> = train
            .present_domains()
            .into_iter()
            .map(|d| {
                let idx = train
                    .images
                    .iter()
                    .enumerate()
                    .filter(|(_, im)| im.domain == d)
                    .map(|(i, _)| i)
                    .collect();
                (d, idx)
            })
            .collect();
        if by_domain.len() < 2 {
            return Err(Error::config(format!(
                "pair sampling needs at least 2 source domains, training set has {}",
                by_domain.len()
            )));
        }
        Ok(Self {
            by_domain,
            all: (0..train.len()).collect(),
        })
    }

    pub fn num_domains(&self) -> usize {
        self.by_domain.len()
    }

    /// Draw `(a, b)` dataset indices: A's domain uniform over sources, B's
    /// uniform over the remaining ones, samples uniform within domain.
    pub fn sample_indices<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let m = self.by_domain.len();
        (0..batch)
            .map(|_| {
                let da = rng.gen_range(0..m);
                let mut db = rng.gen_range(0..m - 1);
                if db >= da {
                    db += 1;
                }
                let pa = &self.by_domain[da].1;
                let pb = &self.by_domain[db].1;
                (pa[rng.gen_range(0..pa.len())], pb[rng.gen_range(0..pb.len())])
            })
            .collect()
    }

    pub fn sample<T: Scalar, R: Rng>(&self, train: &Dataset, batch: usize, rng: &mut R) -> Result<PairBatch<T>> {
        if batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let (ia, ib): (Vec<usize>, Vec<usize>) = self.sample_indices(batch, rng).into_iter().unzip();
        Ok(PairBatch {
            images_a: train.batch_tensor(&ia),
            images_b: train.batch_tensor(&ib),
            labels_a: ia.iter().map(|&i| train.images[i].label).collect(),
            labels_b: ib.iter().map(|&i| train.images[i].label).collect(),
            domains_a: ia.iter().map(|&i| train.images[i].domain).collect(),
            domains_b: ib.iter().map(|&i| train.images[i].domain).collect(),
        })
    }

    /// `batch` indices drawn uniformly from the pooled training set.
    pub fn sample_pooled<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch).map(|_| self.all[rng.gen_range(0..self.all.len())]).collect()
    }
}
