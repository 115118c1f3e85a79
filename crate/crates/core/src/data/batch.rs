use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClassDataset;
use crate::tensor::Tensor;

/// A mini-batch of classification examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Produces the example order of successive epochs. With shuffling on,
/// every epoch draws a fresh permutation from one seeded stream.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

impl Batcher {
    /// `batch_size` is clamped to at least 1.
    pub fn new(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Self {
        Batcher {
            len,
            batch_size: batch_size.max(1),
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Index lists for the next epoch; the last batch may be partial.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            order.shuffle(&mut self.rng);
        }
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// One epoch of batches over `dataset`.
pub fn batch_iter(dataset: &ClassDataset, batch_size: usize, shuffle: bool, seed: u64) -> impl Iterator<Item = Batch> + '_ {
    let order = Batcher::new(dataset.len(), batch_size, shuffle, seed).next_epoch();
    order
        .into_iter()
        .map(move |idx| dataset.gather(&idx).expect("indices come from the dataset"))
}
