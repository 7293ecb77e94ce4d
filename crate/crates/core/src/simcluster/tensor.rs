//! Dense token-major tensors of 64-bit floats.

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl LogicalTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, SimError> {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(SimError::Shape(format!(
                "shape {shape:?} holds {count} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Self {
            shape: vec![rows, cols],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn bytes(&self) -> u64 {
        (self.values.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[r * c..(r + 1) * c]
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut values = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            values.extend_from_slice(self.row(r));
        }
        Self {
            shape: vec![idx.len(), c],
            values,
        }
    }

    /// Rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![end - start, c],
            values: self.values[start * c..end * c].to_vec(),
        }
    }

    /// Splits the last dimension into `parts` equal contiguous slices.
    pub fn split_cols(&self, parts: usize) -> Result<Vec<Self>, SimError> {
        let c = self.cols();
        if parts == 0 || c % parts != 0 {
            return Err(SimError::Shape(format!("cannot split {c} columns into {parts} parts")));
        }
        let w = c / parts;
        Ok((0..parts)
            .map(|p| Self::from_fn(self.rows(), w, |r, j| self.values[r * c + p * w + j]))
            .collect())
    }

    /// Concatenates along the last dimension; inverse of [`split_cols`](Self::split_cols).
    pub fn concat_cols(parts: &[Self]) -> Result<Self, SimError> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(SimError::Shape("concatenated parts differ in row count".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(Self {
            shape: vec![rows, cols],
            values,
        })
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(parts: &[Self]) -> Result<Self, SimError> {
        let cols = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(SimError::Shape("concatenated parts differ in column count".into()));
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        Ok(Self {
            shape: vec![rows, cols],
            values: parts.iter().flat_map(|p| p.values.iter().copied()).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), SimError> {
        if self.shape != other.shape {
            return Err(SimError::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Largest `|a - b| / max(|b|, 1)` over all elements, `other` being the reference.
    pub fn max_rel_error(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}
