use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::stream::{LabelAccess, StreamBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Stm,
    Ltm,
    Baseline,
}

/// Sample store with per-sample provenance (stream step) and optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    kind: BufferKind,
    capacity: Option<usize>,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<Option<usize>>,
    steps: Vec<u64>,
    /// Items offered so far (reservoir bookkeeping).
    seen: u64,
}

impl MemoryBuffer {
    pub fn new(kind: BufferKind, dim: usize, capacity: Option<usize>) -> Self {
        Self {
            kind,
            capacity,
            dim,
            data: Vec::new(),
            labels: Vec::new(),
            steps: Vec::new(),
            seen: 0,
        }
    }

    pub fn kind(&self) -> BufferKind {
        self.kind
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub(crate) fn note_seen(&mut self, n: u64) {
        self.seen += n;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn step_of(&self, i: usize) -> u64 {
        self.steps[i]
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn samples(&self) -> DenseMatrix {
        DenseMatrix::from_vec(self.len(), self.dim, self.data.clone()).expect("consistent buffer")
    }

    pub fn labels(&self, _access: LabelAccess) -> &[Option<usize>] {
        &self.labels
    }

    pub(crate) fn label_of(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn push(&mut self, sample: &[f64], label: Option<usize>, step: u64) -> Result<()> {
        if sample.len() != self.dim {
            return Err(Error::dim("memory sample", self.dim, sample.len()));
        }
        self.data.extend_from_slice(sample);
        self.labels.push(label);
        self.steps.push(step);
        Ok(())
    }

    pub(crate) fn replace(&mut self, i: usize, sample: &[f64], label: Option<usize>, step: u64) {
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(sample);
        self.labels[i] = label;
        self.steps[i] = step;
    }

    /// Appends every sample of the batch, labels riding along untouched.
    pub fn push_batch(&mut self, batch: &StreamBatch) -> Result<()> {
        if batch.samples().cols() != self.dim {
            return Err(Error::dim("memory batch", self.dim, batch.samples().cols()));
        }
        let labels = batch.labels(LabelAccess::supervised());
        for (i, row) in batch.samples().row_iter().enumerate() {
            self.push(row, labels.map(|l| l[i]), batch.step_index())?;
        }
        Ok(())
    }

    /// Removes sample `i`, preserving the order of the rest.
    pub fn remove(&mut self, i: usize) {
        self.data.drain(i * self.dim..(i + 1) * self.dim);
        self.labels.remove(i);
        self.steps.remove(i);
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.labels.clear();
        self.steps.clear();
    }

    /// Copies sample `i` of `other` to the end of this buffer.
    pub fn push_from(&mut self, other: &MemoryBuffer, i: usize) -> Result<()> {
        self.push(other.row(i), other.labels[i], other.steps[i])
    }

    pub(crate) fn consistent(&self) -> bool {
        self.data.len() == self.len() * self.dim && self.labels.len() == self.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_remove_keeps_alignment() {
        let mut b = MemoryBuffer::new(BufferKind::Ltm, 2, None);
        b.push(&[1.0, 2.0], Some(3), 0).unwrap();
        b.push(&[3.0, 4.0], None, 1).unwrap();
        b.push(&[5.0, 6.0], Some(1), 2).unwrap();
        b.remove(1);
        assert_eq!(b.len(), 2);
        assert_eq!(b.row(1), &[5.0, 6.0]);
        assert_eq!(b.labels(LabelAccess::supervised()), &[Some(3), Some(1)]);
        assert_eq!(b.steps(), &[0, 2]);
        assert!(b.consistent());
        assert!(b.push(&[1.0], None, 0).is_err());
    }
}
