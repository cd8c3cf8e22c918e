use std::collections::VecDeque;

use rand::{Rng, RngCore};

use super::{Batch, Transition};
use crate::error::{ensure, Result};

/// FIFO ring of transitions with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    storage: VecDeque<Transition>,
    capacity: usize,
    offline_count: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            storage: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity: capacity.max(1),
            offline_count: 0,
        }
    }

    /// Buffer preloaded with an offline dataset. Offline transitions are
    /// evicted like any other once the buffer is full.
    pub fn with_offline(capacity: usize, data: &[Transition]) -> Self {
        let mut b = Self::new(capacity);
        for t in data {
            b.append(t.clone());
        }
        b.offline_count = data.len();
        b
    }

    pub fn append(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn offline_count(&self) -> usize {
        self.offline_count
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.storage.get(i)
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut (impl RngCore + ?Sized)) -> Result<Vec<usize>> {
        ensure!(!self.storage.is_empty(), State, "cannot sample from an empty replay buffer");
        let n = self.storage.len();
        Ok((0..batch_size).map(|_| rng.gen_range(0..n)).collect())
    }

    pub fn sample(&self, batch_size: usize, rng: &mut (impl RngCore + ?Sized)) -> Result<Batch> {
        let idx = self.sample_indices(batch_size, rng)?;
        Batch::from_transitions(idx.iter().map(|&i| &self.storage[i]))
    }
}
