//! FIFO trajectory buffer with reward-variance-proportional sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::trajectory::Trajectory;

pub const DEFAULT_CAPACITY: usize = 1000;

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<(Trajectory, f64)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `traj`, evicting the oldest entry when full.
    pub fn push(&mut self, traj: Trajectory) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        let var = traj.reward_variance();
        self.items.push_back((traj, var));
    }

    pub fn extend(&mut self, trajs: impl IntoIterator<Item = Trajectory>) {
        for t in trajs {
            self.push(t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter().map(|(t, _)| t)
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.items.get(i).map(|(t, _)| t)
    }

    pub fn variances(&self) -> Vec<f64> {
        self.items.iter().map(|(_, v)| *v).collect()
    }

    /// Sampling distribution: variance-proportional, or uniform when every
    /// variance is zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.items.iter().map(|(_, v)| v).sum();
        let n = self.items.len();
        if total > 0.0 {
            self.items.iter().map(|(_, v)| v / total).collect()
        } else {
            vec![1.0 / n as f64; n]
        }
    }

    /// Draws `batch_size` indices i.i.d. from [`Self::probabilities`].
    pub fn sample_indices<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(CoreError::EmptyBuffer);
        }
        let total: f64 = self.items.iter().map(|(_, v)| v).sum();
        let n = self.items.len();
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for (_, v) in &self.items {
            acc += v;
            cumulative.push(acc);
        }
        let last_positive = (0..n).rev().find(|&j| self.items[j].1 > 0.0);
        Ok((0..batch_size)
            .map(|_| match last_positive {
                Some(last) => {
                    let u = rng.gen::<f64>() * total;
                    // zero-variance entries have zero width and are never hit
                    let i = cumulative.partition_point(|&c| c <= u);
                    i.min(last)
                }
                None => rng.gen_range(0..n),
            })
            .collect())
    }

    pub fn sample_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Trajectory>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.items[i].0)
            .collect())
    }
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}
