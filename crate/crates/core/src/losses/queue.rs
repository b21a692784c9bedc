use std::collections::VecDeque;

use super::UNIT_NORM_TOL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// FIFO ring of unit-norm embeddings used as extra contrastive negatives.
#[derive(Clone, Debug)]
pub struct MemoryQueue {
    dim: usize,
    capacity: usize,
    rows: VecDeque<Vec<f32>>,
}

impl MemoryQueue {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Current fill.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends the rows of `z[n×dim]`, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, z: &Tensor<f32>) -> Result<()> {
        let [_, d] = z.shape()[..] else {
            return Err(Error::Rank(format!("queue rows must be rank 2, got {:?}", z.shape())));
        };
        if d != self.dim {
            return Err(Error::dim("queue_enqueue", &[d], &[self.dim]));
        }
        for (i, row) in z.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("queued row {i} has norm {norm}")));
            }
        }
        for row in z.data().chunks(d) {
            if self.capacity == 0 {
                break;
            }
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Stored rows, oldest first, as `[len × dim]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.rows.iter().flatten().copied().collect();
        Tensor::new(vec![self.rows.len(), self.dim], data).expect("rows have queue width")
    }
}
