//! Kernel PCA on filtered data and the learned QoI map it defines.
//!
//! With `K~` the double-centred Gram matrix of the training rows `d_j`, the
//! QoI components are `Q_i(x) = sum_j alpha_ij k~(x, d_j)` where
//! `K~ alpha_i = (N - 1) l_i alpha_i` and `|alpha_i| = 1 / sqrt((N - 1) l_i)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::FilteredEnsemble;
use crate::instrument;
use crate::linalg::{dense_top_eigen, lanczos_top_eigen, EigenPairs};
use crate::points::Points;

/// Above this many training rows the leading eigenpairs come from Lanczos.
pub const DENSE_EIGEN_LIMIT: usize = 400;

const MEDIAN_SUBSAMPLE: usize = 2000;
const BLOCK_ROWS: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum KpcaError {
    #[error("kernel PCA needs at least 2 rows, got {0}")]
    TooFewSamples(usize),
    #[error("requested {q} components from {n} rows; need 1 <= q <= n - 1")]
    InvalidQ { q: usize, n: usize },
    #[error("only {attainable} of {requested} requested components have positive eigenvalues")]
    RankDeficient { requested: usize, attainable: usize },
    #[error("filtered coordinates differ from the training coordinates")]
    CoordMismatch,
    #[error("matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / scale)`; without a scale the median pairwise squared
    /// distance of the training rows is used.
    Gaussian { scale: Option<f64> },
    /// `x . y`
    Linear,
    /// `(x . y + coef)^degree`
    Polynomial { degree: u32, coef: f64 },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian { scale: None }
    }
}

impl KernelSpec {
    fn validate(&self) -> Result<(), KpcaError> {
        match *self {
            KernelSpec::Gaussian { scale: Some(s) } if !(s > 0.0 && s.is_finite()) => {
                Err(KpcaError::InvalidKernel(format!("gaussian scale must be positive, got {s}")))
            }
            KernelSpec::Polynomial { degree: 0, .. } => Err(KpcaError::InvalidKernel("polynomial degree must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Kernel value computed directly from two rows.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { scale } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / scale.expect("resolved gaussian scale")).exp()
            }
            KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            KernelSpec::Polynomial { degree, coef } => {
                (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + coef).powi(degree as i32)
            }
        }
    }

    fn from_inner(&self, inner: f64, sq_x: f64, sq_y: f64) -> f64 {
        match *self {
            KernelSpec::Gaussian { scale } => {
                let d2 = (sq_x + sq_y - 2.0 * inner).max(0.0);
                (-d2 / scale.expect("resolved gaussian scale")).exp()
            }
            KernelSpec::Linear => inner,
            KernelSpec::Polynomial { degree, coef } => (inner + coef).powi(degree as i32),
        }
    }

    fn is_shift_invariant(&self) -> bool {
        matches!(self, KernelSpec::Gaussian { .. })
    }
}

fn column_means(x: &Points) -> Vec<f64> {
    let mut m = vec![0.0; x.dim()];
    for r in x.rows() {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = x.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn shifted(x: &Points, shift: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x.dim(), |i, j| x.row(i)[j] - shift[j])
}

/// Gram matrix of resolved `kernel` over `x`, with inner products from one
/// matrix product. Shift-invariant kernels are evaluated on column-centred data.
fn gram_matrix(x: &Points, kernel: &KernelSpec, shift: &[f64]) -> DMatrix<f64> {
    instrument::gram();
    let xs = shifted(x, shift);
    let mut g = &xs * xs.transpose();
    let n = x.len();
    let sq: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
    for j in 0..n {
        for i in 0..=j {
            let v = kernel.from_inner(g[(i, j)], sq[i], sq[j]);
            g[(i, j)] = v;
        }
    }
    for j in 0..n {
        for i in j + 1..n {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Median pairwise squared distance over a strided subsample of at most 2000
/// rows.
pub fn median_sq_distance(x: &Points) -> f64 {
    let n = x.len();
    let idx: Vec<usize> = if n <= MEDIAN_SUBSAMPLE {
        (0..n).collect()
    } else {
        (0..MEDIAN_SUBSAMPLE).map(|k| k * n / MEDIAN_SUBSAMPLE).collect()
    };
    let sub = x.select_rows(&idx);
    let shift = column_means(&sub);
    let xs = shifted(&sub, &shift);
    let g = &xs * xs.transpose();
    let m = idx.len();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for j in 0..m {
        for i in 0..j {
            d.push((g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]).max(0.0));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, v, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *v
}

/// Replaces an unset Gaussian scale with the median heuristic on `x`.
pub fn resolve_kernel(kernel: &KernelSpec, x: &Points) -> Result<KernelSpec, KpcaError> {
    kernel.validate()?;
    match kernel {
        KernelSpec::Gaussian { scale: None } => {
            let s = median_sq_distance(x);
            if !(s > 0.0) {
                // all rows (nearly) identical; any positive scale gives a constant Gram
                return Ok(KernelSpec::Gaussian { scale: Some(1.0) });
            }
            Ok(KernelSpec::Gaussian { scale: Some(s) })
        }
        k => Ok(*k),
    }
}

/// Uncentred Gram matrix `K_ij = k(d_i, d_j)`.
pub fn gram(data: &FilteredEnsemble, kernel: &KernelSpec) -> Result<DMatrix<f64>, KpcaError> {
    if data.len() < 2 {
        return Err(KpcaError::TooFewSamples(data.len()));
    }
    let k = resolve_kernel(kernel, data.matrix())?;
    let shift = if k.is_shift_invariant() { column_means(data.matrix()) } else { vec![0.0; data.n_features()] };
    Ok(gram_matrix(data.matrix(), &k, &shift))
}

/// Centres `k` in place and returns its row means and total mean.
fn center_in_place(k: &mut DMatrix<f64>) -> (Vec<f64>, f64) {
    let n = k.nrows();
    let means: Vec<f64> = (0..n).map(|j| k.column(j).iter().sum::<f64>() / n as f64).collect();
    let total = means.iter().sum::<f64>() / n as f64;
    for j in 0..n {
        for i in 0..n {
            k[(i, j)] += total - means[i] - means[j];
        }
    }
    (means, total)
}

/// `K - 1K - K1 + 1K1` with `1` the matrix of entries `1/N`.
pub fn center_gram(mut k: DMatrix<f64>) -> Result<DMatrix<f64>, KpcaError> {
    if k.nrows() != k.ncols() {
        return Err(KpcaError::NonSquare { rows: k.nrows(), cols: k.ncols() });
    }
    center_in_place(&mut k);
    Ok(k)
}

/// A learned QoI map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoiMap {
    coords: Points,
    training: Points,
    kernel: KernelSpec,
    shift: Vec<f64>,
    /// `q x N`, row `i` is `alpha_i`.
    alphas: Points,
    eigenvalues: Vec<f64>,
    gram_row_means: Vec<f64>,
    gram_total_mean: f64,
    /// `N x q` QoI values of the training rows.
    training_scores: Points,
}

impl QoiMap {
    pub fn q(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_training(&self) -> usize {
        self.training.len()
    }

    pub fn coords(&self) -> &Points {
        &self.coords
    }

    /// Resolved kernel (Gaussian scale filled in).
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn alpha(&self, i: usize) -> &[f64] {
        self.alphas.row(i)
    }

    /// `l_1 >= ... >= l_q`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn gram_row_means(&self) -> &[f64] {
        &self.gram_row_means
    }

    pub fn gram_total_mean(&self) -> f64 {
        self.gram_total_mean
    }

    /// QoI values at the training rows, `(K~ alpha_i)_j`.
    pub fn training_scores(&self) -> &Points {
        &self.training_scores
    }

    /// Same map restricted to its leading `q` components.
    pub fn truncate(&self, q: usize) -> QoiMap {
        let q = q.min(self.q());
        let mut out = self.clone();
        out.eigenvalues.truncate(q);
        out.alphas = self.alphas.select_rows(&(0..q).collect::<Vec<_>>());
        out.training_scores = self.training_scores.select_columns(&(0..q).collect::<Vec<_>>());
        out
    }
}

fn sign_fix(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Kernel PCA with `q` components on the rows of `data`.
pub fn kpca(data: &FilteredEnsemble, kernel: &KernelSpec, q: usize) -> Result<QoiMap, KpcaError> {
    let n = data.len();
    if n < 2 {
        return Err(KpcaError::TooFewSamples(n));
    }
    if q == 0 || q > n - 1 {
        return Err(KpcaError::InvalidQ { q, n });
    }
    instrument::kpca();
    let x = data.matrix();
    let kernel = resolve_kernel(kernel, x)?;
    let shift = if kernel.is_shift_invariant() { column_means(x) } else { vec![0.0; x.dim()] };
    let mut k = gram_matrix(x, &kernel, &shift);
    let (row_means, total) = center_in_place(&mut k);
    let trace: f64 = (0..n).map(|i| k[(i, i)]).sum();
    let eig: EigenPairs = if n <= DENSE_EIGEN_LIMIT {
        dense_top_eigen(&k, q)
    } else {
        lanczos_top_eigen(n, q, 1e-11, 0x6b70_6361, |v, out| {
            let y = &k * nalgebra::DVector::from_column_slice(v);
            out.copy_from_slice(y.as_slice());
        })
    };
    let thresh = 1e-12 * (trace / n as f64).max(f64::MIN_POSITIVE);
    let attainable = eig.values.iter().take_while(|&&v| v > thresh).count();
    if attainable < q {
        return Err(KpcaError::RankDeficient { requested: q, attainable });
    }
    let nm1 = (n - 1) as f64;
    let mut alphas = Vec::with_capacity(q * n);
    let mut scores = vec![0.0; n * q];
    let mut ell = Vec::with_capacity(q);
    for (i, (lambda, v)) in eig.values.iter().zip(&eig.vectors).enumerate() {
        let mut a = v.clone();
        sign_fix(&mut a);
        let s = 1.0 / lambda.sqrt();
        a.iter_mut().for_each(|x| *x *= s);
        let ka = &k * nalgebra::DVector::from_column_slice(&a);
        for j in 0..n {
            scores[j * q + i] = ka[j];
        }
        alphas.extend(a);
        ell.push(lambda / nm1);
    }
    Ok(QoiMap {
        coords: data.coords().clone(),
        training: x.clone(),
        kernel,
        shift,
        alphas: Points::new(n, alphas),
        eigenvalues: ell,
        gram_row_means: row_means,
        gram_total_mean: total,
        training_scores: Points::new(q, scores),
    })
}

fn same_coords(a: &Points, b: &Points) -> bool {
    a.dim() == b.dim()
        && a.len() == b.len()
        && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
}

/// Evaluates the QoI map on new filtered data.
pub fn qoi_eval(map: &QoiMap, new_data: &FilteredEnsemble) -> Result<Points, KpcaError> {
    if !same_coords(map.coords(), new_data.coords()) {
        return Err(KpcaError::CoordMismatch);
    }
    Ok(qoi_eval_rows(map, new_data.matrix()))
}

/// Evaluates the QoI map on raw rows, assumed aligned with the training
/// coordinates.
pub fn qoi_eval_rows(map: &QoiMap, rows: &Points) -> Points {
    assert_eq!(rows.dim(), map.training.dim(), "row length must match the training data");
    let n = map.n_training();
    let q = map.q();
    let train = shifted(&map.training, &map.shift);
    let train_sq: Vec<f64> = (0..n).map(|j| train.row(j).norm_squared()).collect();
    let mut out = Vec::with_capacity(rows.len() * q);
    let mut start = 0;
    while start < rows.len() {
        let end = (start + BLOCK_ROWS).min(rows.len());
        let block = rows.select_rows(&(start..end).collect::<Vec<_>>());
        let xs = shifted(&block, &map.shift);
        let inner = &xs * train.transpose();
        for b in 0..block.len() {
            let sq_x = xs.row(b).norm_squared();
            let kv: Vec<f64> = (0..n).map(|j| map.kernel.from_inner(inner[(b, j)], sq_x, train_sq[j])).collect();
            let mean_k = kv.iter().sum::<f64>() / n as f64;
            for i in 0..q {
                let a = map.alpha(i);
                let v: f64 = (0..n)
                    .map(|j| a[j] * (kv[j] - mean_k - map.gram_row_means[j] + map.gram_total_mean))
                    .sum();
                out.push(v);
            }
        }
        start = end;
    }
    Points::new(q, out)
}
