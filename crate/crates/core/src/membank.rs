//! Domain-specific FIFO memories of `(key, label)` pairs.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

use crate::numgrad::Tensor;

/// Keys may deviate from unit norm by at most this much on enqueue.
pub const KEY_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("batch of {batch} exceeds bank capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("key {row} has norm {norm}, expected 1")]
    NotNormalized { row: usize, norm: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{keys} keys but {labels} labels")]
    LengthMismatch { keys: usize, labels: usize },
    #[error("key width {got}, bank holds {expected}-d keys")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub key: Vec<f64>,
    pub label: usize,
    pub step: u64,
}

/// Contiguous copy of a bank, oldest entry first.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    pub keys: Tensor,
    pub labels: Vec<usize>,
}

impl BankSnapshot {
    pub fn empty(dim: usize) -> Self {
        Self { keys: Tensor::zeros(&[0, dim]), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates snapshots in order (used when several sources share one bank view).
    pub fn concat(parts: &[&BankSnapshot], dim: usize) -> Self {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            data.extend_from_slice(p.keys.data());
            labels.extend_from_slice(&p.labels);
        }
        Self { keys: Tensor::matrix(labels.len(), dim, data).unwrap(), labels }
    }
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    domain_id: usize,
    capacity: usize,
    dim: usize,
    classes: usize,
    entries: VecDeque<MemoryEntry>,
    next_step: u64,
}

impl MemoryBank {
    pub fn new(domain_id: usize, capacity: usize, dim: usize, classes: usize) -> Self {
        Self {
            domain_id,
            capacity,
            dim,
            classes,
            entries: VecDeque::with_capacity(capacity),
            next_step: 0,
        }
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Appends one row per label, evicting the oldest entries beyond capacity.
    /// Validation happens up front; a rejected batch leaves the bank as it was.
    pub fn enqueue(&mut self, keys: &Tensor, labels: &[usize]) -> Result<(), BankError> {
        let (rows, cols) = match keys.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => (0, self.dim),
        };
        if rows != labels.len() {
            return Err(BankError::LengthMismatch { keys: rows, labels: labels.len() });
        }
        if rows > self.capacity {
            return Err(BankError::BatchTooLarge { batch: rows, capacity: self.capacity });
        }
        if rows > 0 && cols != self.dim {
            return Err(BankError::DimMismatch { expected: self.dim, got: cols });
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= self.classes {
                return Err(BankError::LabelOutOfRange { label, classes: self.classes });
            }
            let norm = keys.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > KEY_NORM_TOL {
                return Err(BankError::NotNormalized { row, norm });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(MemoryEntry {
                key: keys.row(row).to_vec(),
                label,
                step: self.next_step,
            });
            self.next_step += 1;
        }
        Ok(())
    }

    /// Keys whose label equals `class` (`positive`) or differs from it, in step order.
    pub fn select_by_label(&self, class: usize, positive: bool) -> (Tensor, usize) {
        let picked: Vec<&MemoryEntry> =
            self.entries.iter().filter(|e| (e.label == class) == positive).collect();
        let mut data = Vec::with_capacity(picked.len() * self.dim);
        for e in &picked {
            data.extend_from_slice(&e.key);
        }
        (Tensor::matrix(picked.len(), self.dim, data).unwrap(), picked.len())
    }

    pub fn snapshot(&self) -> BankSnapshot {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        let mut labels = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            data.extend_from_slice(&e.key);
            labels.push(e.label);
        }
        BankSnapshot { keys: Tensor::matrix(labels.len(), self.dim, data).unwrap(), labels }
    }

    /// CSV rows `step,domain,label,k_0..k_{d-1}` (no header).
    pub fn write_csv_rows(&self, out: &mut String) {
        for e in &self.entries {
            let _ = write!(out, "{},{},{}", e.step, self.domain_id, e.label);
            for v in &e.key {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
}

/// Header line matching [`MemoryBank::write_csv_rows`].
pub fn csv_header(dim: usize) -> String {
    let mut h = String::from("step,domain,label");
    for i in 0..dim {
        let _ = write!(h, ",k_{i}");
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_keys(n: usize, dim: usize, offset: usize) -> Tensor {
        let mut data = vec![0.0; n * dim];
        for i in 0..n {
            data[i * dim + (i + offset) % dim] = 1.0;
        }
        Tensor::matrix(n, dim, data).unwrap()
    }

    #[test]
    fn enqueue_into_empty_bank_keeps_order() {
        let mut b = MemoryBank::new(0, 8, 3, 4);
        b.enqueue(&unit_keys(4, 3, 0), &[0, 1, 2, 3]).unwrap();
        assert_eq!(b.len(), 4);
        let labels: Vec<usize> = b.entries().map(|e| e.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn full_bank_evicts_oldest() {
        let mut b = MemoryBank::new(0, 8, 2, 2);
        for _ in 0..4 {
            b.enqueue(&unit_keys(2, 2, 0), &[0, 1]).unwrap();
        }
        b.enqueue(&unit_keys(3, 2, 0), &[0, 1, 0]).unwrap();
        let steps: Vec<u64> = b.entries().map(|e| e.step).collect();
        assert_eq!(steps, (3..=10).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_is_rejected_without_change() {
        let mut b = MemoryBank::new(0, 2, 2, 2);
        b.enqueue(&unit_keys(1, 2, 0), &[1]).unwrap();
        let before = b.snapshot();
        let err = b.enqueue(&unit_keys(3, 2, 0), &[0, 0, 0]).unwrap_err();
        assert!(matches!(err, BankError::BatchTooLarge { .. }));
        assert_eq!(b.snapshot(), before);
    }

    #[test]
    fn invalid_keys_and_labels_rejected() {
        let mut b = MemoryBank::new(0, 4, 2, 2);
        let bad = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(b.enqueue(&bad, &[0]), Err(BankError::NotNormalized { .. })));
        assert!(matches!(
            b.enqueue(&unit_keys(1, 2, 0), &[2]),
            Err(BankError::LabelOutOfRange { .. })
        ));
        assert!(b.is_empty());
    }

    #[test]
    fn select_by_label_examples() {
        let mut b = MemoryBank::new(0, 8, 3, 6);
        let keys = unit_keys(3, 3, 0);
        b.enqueue(&keys, &[0, 1, 0]).unwrap();
        let (pos, n) = b.select_by_label(0, true);
        assert_eq!(n, 2);
        assert_eq!(pos.row(0), keys.row(0));
        assert_eq!(pos.row(1), keys.row(2));
        let (neg, n) = b.select_by_label(0, false);
        assert_eq!(n, 1);
        assert_eq!(neg.row(0), keys.row(1));
        assert_eq!(b.select_by_label(5, true).1, 0);
    }

    #[test]
    fn snapshot_semantics() {
        let mut b = MemoryBank::new(1, 16, 2, 2);
        let s0 = b.snapshot();
        assert_eq!(s0.keys.shape(), &[0, 2]);
        assert!(s0.labels.is_empty());
        for _ in 0..3 {
            b.enqueue(&unit_keys(2, 2, 1), &[1, 0]).unwrap();
        }
        let s = b.snapshot();
        assert_eq!(s.len(), 6);
        b.enqueue(&unit_keys(2, 2, 0), &[0, 0]).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.labels, vec![1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn csv_dump_shape() {
        let mut b = MemoryBank::new(2, 4, 2, 2);
        b.enqueue(&unit_keys(2, 2, 0), &[1, 0]).unwrap();
        let mut s = String::new();
        b.write_csv_rows(&mut s);
        assert_eq!(csv_header(2), "step,domain,label,k_0,k_1");
        assert_eq!(s, "0,2,1,1,0\n1,2,0,0,1\n");
    }
}
