//! FIFO replay buffers of detached adjoint-matching targets.

use std::collections::VecDeque;

use rand::Rng;

use crate::dynamics::{AdjointPath, Trajectory};
use crate::error::{NaasError, Result};
use crate::scalar::Scalar;

/// `(t, X_t, a_t)` on the annealed stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdjoint<T> {
    pub t: T,
    pub x: Vec<T>,
    pub a: Vec<T>,
}

/// `(X_0, a_0)` at the stage boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair<T> {
    pub x0: Vec<T>,
    pub a0: Vec<T>,
}

/// Capacity-bounded store; the oldest entry is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<E> {
    capacity: usize,
    entries: VecDeque<E>,
    pushed: u64,
}

impl<E: Clone> ReplayBuffer<E> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(NaasError::InvalidInput(
                "buffer capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of entries ever inserted.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, entry: E) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        self.pushed += 1;
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.entries.iter()
    }

    /// `size` entries drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<E>> {
        if self.entries.is_empty() {
            return Err(NaasError::InvalidState(
                "cannot sample from an empty buffer".into(),
            ));
        }
        let n = self.entries.len();
        Ok((0..size)
            .map(|_| self.entries[rng.random_range(0..n)].clone())
            .collect())
    }
}

pub type BufferU<T> = ReplayBuffer<StateAdjoint<T>>;
pub type BufferV<T> = ReplayBuffer<BoundaryPair<T>>;

fn check_grid<T: Scalar>(traj: &Trajectory<T>, adj: &AdjointPath<T>) -> Result<()> {
    if traj.grid().n_anneal != adj.n_anneal() {
        return Err(NaasError::InvalidInput(format!(
            "trajectory has {} annealed steps, adjoint has {}",
            traj.grid().n_anneal,
            adj.n_anneal()
        )));
    }
    Ok(())
}

impl<T: Scalar> BufferU<T> {
    /// Inserts every `stride`-th annealed-stage triple, starting at `t = 0`.
    /// Diverged paths insert nothing.
    pub fn push_trajectory(
        &mut self,
        traj: &Trajectory<T>,
        adj: &AdjointPath<T>,
        stride: usize,
    ) -> Result<usize> {
        check_grid(traj, adj)?;
        if stride == 0 {
            return Err(NaasError::InvalidInput("stride must be positive".into()));
        }
        if traj.diverged() {
            return Ok(0);
        }
        let grid = traj.grid();
        let mut count = 0;
        for j in (0..=grid.n_anneal).step_by(stride) {
            self.push(StateAdjoint {
                t: grid.anneal_time(j),
                x: traj.state(grid.boundary() + j).to_vec(),
                a: adj.at(j).to_vec(),
            });
            count += 1;
        }
        Ok(count)
    }
}

impl<T: Scalar> BufferV<T> {
    /// Inserts `(X_0, a_0)`; diverged paths insert nothing.
    pub fn push_boundary(&mut self, traj: &Trajectory<T>, adj: &AdjointPath<T>) -> Result<usize> {
        check_grid(traj, adj)?;
        if traj.diverged() {
            return Ok(0);
        }
        self.push(BoundaryPair {
            x0: traj.boundary_state().to_vec(),
            a0: adj.at(0).to_vec(),
        });
        Ok(1)
    }
}
