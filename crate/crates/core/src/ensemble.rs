//! Raw and filtered data ensembles.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::Points;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("sample {index}: {coords} coordinates but {values} values")]
    LengthMismatch { index: usize, coords: usize, values: usize },
    #[error("sample {index}: coordinate dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("sample {index}: coordinates differ from the first sample")]
    CoordsNotShared { index: usize },
    #[error("ensemble is empty")]
    Empty,
}

/// One sample's measurements: values recorded at coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub coords: Arc<Points>,
    pub values: Vec<f64>,
}

/// Per-sample measurement vectors, each with its own coordinates.
///
/// Coordinates may differ between samples; samples that share a coordinate
/// set share one allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEnsemble {
    dim: usize,
    samples: Vec<Sample>,
}

impl DataEnsemble {
    pub fn new(dim: usize, samples: Vec<Sample>) -> Result<Self, EnsembleError> {
        for (index, s) in samples.iter().enumerate() {
            if s.coords.dim() != dim {
                return Err(EnsembleError::DimensionMismatch { index, expected: dim, got: s.coords.dim() });
            }
            if s.coords.len() != s.values.len() {
                return Err(EnsembleError::LengthMismatch {
                    index,
                    coords: s.coords.len(),
                    values: s.values.len(),
                });
            }
        }
        Ok(Self { dim, samples })
    }

    /// All samples recorded at the same coordinates.
    pub fn with_shared_coords(coords: Points, rows: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        let coords = Arc::new(coords);
        let dim = coords.dim();
        let samples = rows
            .into_iter()
            .map(|values| Sample { coords: Arc::clone(&coords), values })
            .collect();
        Self::new(dim, samples)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn select(&self, idx: &[usize]) -> DataEnsemble {
        DataEnsemble { dim: self.dim, samples: idx.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Keeps entries whose coordinate on `axis` equals `value` (within
    /// `1e-9`) and drops that axis. Used to slice spatio-temporal data into
    /// one time step, or a time series at one location.
    pub fn restrict(&self, axis: usize, value: f64) -> DataEnsemble {
        assert!(axis < self.dim && self.dim > 1);
        let keep: Vec<usize> = (0..self.dim).filter(|&j| j != axis).collect();
        let mut cache: Vec<(*const Points, Arc<Points>, Vec<usize>)> = Vec::new();
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let key = Arc::as_ptr(&s.coords);
                let pos = cache.iter().position(|(k, _, _)| *k == key);
                let pos = pos.unwrap_or_else(|| {
                    let idx: Vec<usize> = (0..s.coords.len())
                        .filter(|&i| (s.coords.row(i)[axis] - value).abs() <= 1e-9)
                        .collect();
                    let reduced = s.coords.select_rows(&idx).select_columns(&keep);
                    cache.push((key, Arc::new(reduced), idx));
                    cache.len() - 1
                });
                let (_, coords, idx) = &cache[pos];
                Sample { coords: Arc::clone(coords), values: idx.iter().map(|&i| s.values[i]).collect() }
            })
            .collect();
        DataEnsemble { dim: self.dim - 1, samples }
    }

    /// Matrix view when every sample shares identical coordinates (data used
    /// without filtering).
    pub fn to_filtered(&self) -> Result<FilteredEnsemble, EnsembleError> {
        let first = self.samples.first().ok_or(EnsembleError::Empty)?;
        let coords = first.coords.as_ref().clone();
        let mut data = Vec::with_capacity(self.len() * coords.len());
        for (index, s) in self.samples.iter().enumerate() {
            if !Arc::ptr_eq(&s.coords, &first.coords) && *s.coords != *first.coords {
                return Err(EnsembleError::CoordsNotShared { index });
            }
            data.extend_from_slice(&s.values);
        }
        Ok(FilteredEnsemble::new(coords, Points::new(first.values.len().max(1), data)))
    }
}

/// Filtered data: every row evaluated at one common coordinate set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilteredEnsemble {
    coords: Points,
    matrix: Points,
}

impl FilteredEnsemble {
    pub fn new(coords: Points, matrix: Points) -> Self {
        assert_eq!(coords.len(), matrix.dim(), "row length must equal coordinate count");
        Self { coords, matrix }
    }

    pub fn coords(&self) -> &Points {
        &self.coords
    }

    /// Rows are samples, columns are filtered coordinates.
    pub fn matrix(&self) -> &Points {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.coords.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn select(&self, idx: &[usize]) -> FilteredEnsemble {
        FilteredEnsemble { coords: self.coords.clone(), matrix: self.matrix.select_rows(idx) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restrict_slices_time() {
        let coords = Points::from_rows(&[[0.0, 1.0], [0.0, 2.0], [1.0, 1.0], [1.0, 2.0]]);
        let e = DataEnsemble::with_shared_coords(coords, vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]])
            .unwrap();
        let t2 = e.restrict(1, 2.0);
        assert_eq!(t2.dim(), 1);
        assert_eq!(t2.sample(1).values, vec![6.0, 8.0]);
        assert_eq!(t2.sample(0).coords.as_slice(), &[0.0, 1.0]);
        assert!(Arc::ptr_eq(&t2.sample(0).coords, &t2.sample(1).coords));
        let f = t2.to_filtered().unwrap();
        assert_eq!(f.matrix().row(0), &[2.0, 4.0]);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let s = Sample { coords: Arc::new(Points::from_scalars(&[0.0, 1.0])), values: vec![1.0] };
        assert_eq!(
            DataEnsemble::new(1, vec![s]).unwrap_err(),
            EnsembleError::LengthMismatch { index: 0, coords: 2, values: 1 }
        );
    }
}
