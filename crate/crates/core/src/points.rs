use serde::{Deserialize, Serialize};

/// A set of points in R^m stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    /// Builds a point set from row-major data. Panics if `data.len()` is not a
    /// multiple of `dim` or `dim == 0`.
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0, "point dimension must be positive");
        assert_eq!(data.len() % dim, 0, "data length {} not a multiple of dim {}", data.len(), dim);
        Self { dim, data }
    }

    pub fn empty(dim: usize) -> Self {
        Self::new(dim, Vec::new())
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self::new(1, values.to_vec())
    }

    /// Builds from a list of rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), dim, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    /// Values of one coordinate across all points.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Points {
        let mut data = Vec::with_capacity(self.len() * cols.len());
        for r in self.rows() {
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Points::new(cols.len(), data)
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Points {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Points::new(self.dim, data)
    }

    /// Per-axis (min, max) over all points.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for r in self.rows() {
            for (bj, &x) in b.iter_mut().zip(r) {
                bj.0 = bj.0.min(x);
                bj.1 = bj.1.max(x);
            }
        }
        b
    }

    /// Tensor-product grid; the first axis varies slowest.
    pub fn tensor_grid(axes: &[Vec<f64>]) -> Points {
        let dim = axes.len();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut data = Vec::with_capacity(total * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            for (j, &k) in idx.iter().enumerate() {
                data.push(axes[j][k]);
            }
            for j in (0..dim).rev() {
                idx[j] += 1;
                if idx[j] < axes[j].len() {
                    break;
                }
                idx[j] = 0;
            }
        }
        Points::new(dim, data)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
