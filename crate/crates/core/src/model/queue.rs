use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{l2_normalize, Rng, Tensor};

/// Label stored for keys that carry no class (self-supervised queues and
/// the random seed embeddings).
pub const UNLABELED: i64 = -1;

/// Fixed-capacity FIFO ring of unit-norm key embeddings, optionally with
/// labels.
///
/// The buffer starts out holding random unit vectors, but only slots written
/// by [`KeyQueue::enqueue`] are visible to losses: slots `0..filled` before
/// the first wraparound, all slots afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    labeled: bool,
    embeddings: Vec<f64>,
    labels: Vec<i64>,
    write: usize,
    filled: usize,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize, labeled: bool, rng: &mut Rng) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(LabError::Config(format!("queue capacity {capacity} / dim {dim} must be positive")));
        }
        let raw = Tensor::from_vec(vec![capacity, dim], (0..capacity * dim).map(|_| rng.normal()).collect())?;
        Ok(Self {
            capacity,
            dim,
            labeled,
            embeddings: l2_normalize(&raw).into_data(),
            labels: vec![UNLABELED; capacity],
            write: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn write_pointer(&self) -> usize {
        self.write
    }

    /// True once every seed slot has been overwritten.
    pub fn is_warm(&self) -> bool {
        self.filled == self.capacity
    }

    pub fn enqueue(&mut self, keys: &Tensor, labels: Option<&[usize]>) -> Result<()> {
        let b = keys.rows();
        if keys.shape().len() != 2 || keys.cols() != self.dim {
            return Err(LabError::Contract(format!("enqueue: keys {:?} do not match queue dim {}", keys.shape(), self.dim)));
        }
        if b > self.capacity {
            return Err(LabError::Contract(format!("enqueue: batch {b} exceeds capacity {}", self.capacity)));
        }
        for i in 0..b {
            let n = keys.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(LabError::Contract(format!("enqueue: key {i} has norm {n}, expected 1")));
            }
        }
        match (self.labeled, labels) {
            (true, Some(l)) if l.len() == b => {}
            (true, _) => return Err(LabError::Contract("enqueue: labeled queue needs one label per key".into())),
            (false, Some(_)) => return Err(LabError::Contract("enqueue: labels given to an unlabeled queue".into())),
            (false, None) => {}
        }
        for i in 0..b {
            let slot = self.write;
            self.embeddings[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(keys.row(i));
            self.labels[slot] = labels.map_or(UNLABELED, |l| l[i] as i64);
            self.write = (self.write + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Visible keys (`filled × dim`) in slot order, with their labels.
    /// `None` when nothing has been enqueued yet.
    pub fn visible(&self) -> Option<(Tensor, &[i64])> {
        if self.filled == 0 {
            return None;
        }
        let keys = Tensor::from_vec(vec![self.filled, self.dim], self.embeddings[..self.filled * self.dim].to_vec()).expect("filled > 0");
        Some((keys, &self.labels[..self.filled]))
    }

    /// Visible slots, oldest first.
    pub fn age_order(&self) -> Vec<usize> {
        if self.filled < self.capacity {
            (0..self.filled).collect()
        } else {
            (self.write..self.capacity).chain(0..self.write).collect()
        }
    }

    pub fn key(&self, slot: usize) -> &[f64] {
        &self.embeddings[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn label(&self, slot: usize) -> i64 {
        self.labels[slot]
    }

    /// Every buffer slot, including unwritten seed embeddings.
    pub fn raw_embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub(crate) fn from_parts(
        capacity: usize,
        dim: usize,
        labeled: bool,
        embeddings: Vec<f64>,
        labels: Vec<i64>,
        write: usize,
        filled: usize,
    ) -> Option<Self> {
        (embeddings.len() == capacity * dim && labels.len() == capacity && write < capacity && filled <= capacity).then_some(Self {
            capacity,
            dim,
            labeled,
            embeddings,
            labels,
            write,
            filled,
        })
    }
}
