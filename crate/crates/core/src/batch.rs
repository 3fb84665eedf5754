//! Shuffled mini-batches over a dataset.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolgenError};
use crate::preprocess::augment;
use crate::rng::{RngState, StreamRng};
use crate::volume::{Dataset, Volume3D};

/// Endless stream of batches of exactly `batch` volumes.
///
/// Each epoch is a fresh permutation of the dataset; a trailing partial
/// batch is dropped. Shuffling and augmentation draw from the same owned
/// stream, so the sequence is a pure function of the initial rng state.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    dataset: Arc<Dataset>,
    batch: usize,
    augment: bool,
    rng: StreamRng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

/// Resumable position of a [`BatchIterator`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchState {
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

impl BatchIterator {
    pub fn new(dataset: Arc<Dataset>, batch: usize, mut rng: StreamRng, augment: bool) -> Result<Self> {
        if batch == 0 || dataset.len() < batch {
            return Err(VolgenError::Data(format!(
                "dataset of {} volumes cannot fill a batch of {batch}",
                dataset.len()
            )));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            dataset,
            batch,
            augment,
            rng,
            order,
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn restore(dataset: Arc<Dataset>, batch: usize, augment: bool, state: &BatchState) -> Result<Self> {
        let mut it = Self::new(dataset, batch, state.rng.restore()?, augment)?;
        let mut sorted = state.order.clone();
        sorted.sort_unstable();
        if sorted != (0..it.dataset.len()).collect::<Vec<_>>() || state.cursor > it.order.len() {
            return Err(VolgenError::Checkpoint("batch order does not match the dataset".into()));
        }
        it.rng = state.rng.restore()?;
        it.order = state.order.clone();
        it.cursor = state.cursor;
        it.epoch = state.epoch;
        Ok(it)
    }

    pub fn state(&self) -> BatchState {
        BatchState {
            rng: RngState::capture(&self.rng),
            order: self.order.clone(),
            cursor: self.cursor,
            epoch: self.epoch,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<Volume3D> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        idx.iter()
            .map(|&i| {
                let v = self.dataset.get(i);
                if self.augment { augment(v, &mut self.rng) } else { v.clone() }
            })
            .collect()
    }

    /// Indices the next batch will draw, without advancing.
    pub fn peek_indices(&self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            return Vec::new();
        }
        self.order[self.cursor..self.cursor + self.batch].to_vec()
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<Volume3D>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_dataset;
    use crate::rng::{stream, Stream};

    fn data(n: usize) -> Arc<Dataset> {
        Arc::new(phantom_dataset(3, n, 16).unwrap())
    }

    #[test]
    fn two_batches_per_epoch() {
        let mut it = BatchIterator::new(data(10), 4, stream(0, Stream::Data), false).unwrap();
        assert_eq!(it.batches_per_epoch(), 2);
        it.next_batch();
        it.next_batch();
        assert_eq!(it.epoch(), 0);
        assert_eq!(it.next_batch().len(), 4);
        assert_eq!(it.epoch(), 1);
    }

    #[test]
    fn epoch_visits_distinct_volumes() {
        let ds = data(10);
        let mut it = BatchIterator::new(ds.clone(), 5, stream(0, Stream::Data), false).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..2 {
            seen.extend(it.peek_indices());
            it.next_batch();
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_sequence() {
        let ds = data(6);
        let a: Vec<_> = BatchIterator::new(ds.clone(), 2, stream(5, Stream::Data), true).unwrap().take(7).collect();
        let b: Vec<_> = BatchIterator::new(ds, 2, stream(5, Stream::Data), true).unwrap().take(7).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn no_augment_yields_stored_volumes() {
        let ds = data(5);
        let mut it = BatchIterator::new(ds.clone(), 2, stream(1, Stream::Data), false).unwrap();
        for _ in 0..5 {
            let idx = it.peek_indices();
            let b = it.next_batch();
            for (i, v) in idx.iter().zip(&b) {
                assert_eq!(v, ds.get(*i));
            }
        }
    }

    #[test]
    fn too_small_dataset() {
        assert!(BatchIterator::new(data(3), 4, stream(0, Stream::Data), false).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ds = data(7);
        let mut a = BatchIterator::new(ds.clone(), 3, stream(2, Stream::Data), true).unwrap();
        for _ in 0..3 {
            a.next_batch();
        }
        let state = serde_json::to_string(&a.state()).unwrap();
        let mut b = BatchIterator::restore(ds, 3, true, &serde_json::from_str(&state).unwrap()).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
