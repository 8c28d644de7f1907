//! Gaussian kernel density estimation (optionally weighted), total-variation
//! distance by quadrature, and weighted resampling.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::Points;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("no samples")]
    EmptyInput,
    #[error("at least 2 samples required, got {0}")]
    TooFewSamples(usize),
    #[error("{got} weights for {expected} samples")]
    WeightLength { expected: usize, got: usize },
    #[error("weights must be finite, nonnegative and not all zero")]
    InvalidWeights,
    #[error("sample covariance is singular; widen the bandwidth or drop constant dimensions")]
    DegenerateCovariance,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid quadrature grid: {0}")]
    InvalidGrid(String),
    #[error("all resampling weights are zero")]
    AllZeroWeights,
}

/// Bandwidth selection for the Gaussian kernel. The kernel covariance is the
/// (weighted) sample covariance scaled by `factor^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// `factor = n_eff^(-1 / (m + 4))`
    #[default]
    Scott,
    /// `factor = (n_eff (m + 2) / 4)^(-1 / (m + 4))`
    Silverman,
    /// A fixed factor.
    Factor(f64),
}

impl BandwidthRule {
    pub fn factor(&self, n_eff: f64, dim: usize) -> f64 {
        let m = dim as f64;
        match *self {
            Self::Scott => n_eff.powf(-1.0 / (m + 4.0)),
            Self::Silverman => (n_eff * (m + 2.0) / 4.0).powf(-1.0 / (m + 4.0)),
            Self::Factor(f) => f,
        }
    }
}

/// Anything that can be evaluated as a density on R^m.
pub trait Density: Sync {
    fn dim(&self) -> usize;

    fn pdf(&self, x: &[f64]) -> f64;

    fn pdf_many(&self, pts: &Points) -> Vec<f64> {
        (0..pts.len()).into_par_iter().map(|i| self.pdf(pts.row(i))).collect()
    }
}

/// Wraps a closure as a [`Density`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Density for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Serialize, Deserialize)]
struct DensityRepr {
    centers: Points,
    weights: Vec<f64>,
    bandwidth: Vec<f64>,
}

/// Mixture of Gaussians sharing one covariance `H`, centred on the samples.
/// Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityRepr", into = "DensityRepr")]
pub struct DensityEstimate {
    centers: Points,
    weights: Vec<f64>,
    /// Kernel covariance `H`, row-major m x m.
    bandwidth: Vec<f64>,
    /// Inverse of the lower Cholesky factor of `H`.
    whiten: Vec<f64>,
    whitened_centers: Vec<f64>,
    log_norm: f64,
}

impl From<DensityEstimate> for DensityRepr {
    fn from(d: DensityEstimate) -> Self {
        DensityRepr { centers: d.centers, weights: d.weights, bandwidth: d.bandwidth }
    }
}

impl TryFrom<DensityRepr> for DensityEstimate {
    type Error = DensityError;

    fn try_from(r: DensityRepr) -> Result<Self, Self::Error> {
        let s: f64 = r.weights.iter().sum();
        if r.weights.len() != r.centers.len() || (s - 1.0).abs() > 1e-12 || r.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DensityError::InvalidWeights);
        }
        DensityEstimate::build(r.centers, r.weights, r.bandwidth)
    }
}

impl DensityEstimate {
    /// Fits a Gaussian KDE. Weights, when given, are normalized internally and
    /// the bandwidth uses the effective sample size `(sum w)^2 / sum w^2`.
    pub fn fit(samples: &Points, weights: Option<&[f64]>, rule: BandwidthRule) -> Result<Self, DensityError> {
        let n = samples.len();
        if n == 0 {
            return Err(DensityError::EmptyInput);
        }
        if n < 2 {
            return Err(DensityError::TooFewSamples(n));
        }
        let w = normalized_weights(n, weights)?;
        crate::instrument::kde_fit();
        let m = samples.dim();
        let sum_sq: f64 = w.iter().map(|x| x * x).sum();
        let n_eff = 1.0 / sum_sq;
        let mut mean = vec![0.0; m];
        for (x, &wi) in samples.rows().zip(&w) {
            for j in 0..m {
                mean[j] += wi * x[j];
            }
        }
        let mut cov = vec![0.0; m * m];
        for (x, &wi) in samples.rows().zip(&w) {
            for a in 0..m {
                let da = x[a] - mean[a];
                for b in 0..=a {
                    cov[a * m + b] += wi * da * (x[b] - mean[b]);
                }
            }
        }
        let denom = 1.0 - sum_sq;
        if !(denom > 0.0) {
            return Err(DensityError::DegenerateCovariance);
        }
        let factor = rule.factor(n_eff, m);
        for a in 0..m {
            for b in 0..=a {
                let v = cov[a * m + b] / denom * factor * factor;
                cov[a * m + b] = v;
                cov[b * m + a] = v;
            }
        }
        let scale = samples.rows().flatten().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
        if (0..m).any(|a| !(cov[a * m + a] > 1e-28 * scale * scale)) {
            return Err(DensityError::DegenerateCovariance);
        }
        Self::build(samples.clone(), w, cov)
    }

    /// Builds a mixture from explicit centers, weights and kernel covariance.
    pub fn with_bandwidth(centers: Points, weights: Vec<f64>, bandwidth: Vec<f64>) -> Result<Self, DensityError> {
        let n = centers.len();
        if n == 0 {
            return Err(DensityError::EmptyInput);
        }
        let w = normalized_weights(n, Some(&weights))?;
        Self::build(centers, w, bandwidth)
    }

    fn build(centers: Points, w: Vec<f64>, bandwidth: Vec<f64>) -> Result<Self, DensityError> {
        let m = centers.dim();
        if bandwidth.len() != m * m {
            return Err(DensityError::DimensionMismatch { expected: m * m, got: bandwidth.len() });
        }
        let h = DMatrix::from_row_slice(m, m, &bandwidth);
        let chol = h.clone().cholesky().ok_or(DensityError::DegenerateCovariance)?;
        let l = chol.l();
        let l_inv = l.clone().try_inverse().ok_or(DensityError::DegenerateCovariance)?;
        let log_det: f64 = (0..m).map(|i| 2.0 * l[(i, i)].ln()).sum();
        if !log_det.is_finite() {
            return Err(DensityError::DegenerateCovariance);
        }
        let log_norm = -0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
        let mut whiten = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                whiten[a * m + b] = l_inv[(a, b)];
            }
        }
        let mut whitened_centers = Vec::with_capacity(centers.len() * m);
        for c in centers.rows() {
            whitened_centers.extend(apply_lower(&whiten, m, c));
        }
        Ok(Self { centers, weights: w, bandwidth, whiten, whitened_centers, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.centers.dim()
    }

    pub fn centers(&self) -> &Points {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Kernel covariance `H`, row-major.
    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    fn sq_mahalanobis_terms<'a>(&'a self, x: &[f64]) -> impl Iterator<Item = (f64, f64)> + 'a {
        let m = self.dim();
        let z = apply_lower(&self.whiten, m, x);
        self.whitened_centers.chunks_exact(m).zip(&self.weights).map(move |(c, &w)| {
            let d2: f64 = c.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            (w, d2)
        })
    }

    /// Density value at one point.
    pub fn eval_point(&self, x: &[f64]) -> f64 {
        let m = self.dim();
        let s: f64 = match m {
            1 => {
                let z = self.whiten[0] * x[0];
                self.whitened_centers
                    .iter()
                    .zip(&self.weights)
                    .map(|(c, w)| w * (-0.5 * (c - z) * (c - z)).exp())
                    .sum()
            }
            2 => {
                let z0 = self.whiten[0] * x[0];
                let z1 = self.whiten[2] * x[0] + self.whiten[3] * x[1];
                self.whitened_centers
                    .chunks_exact(2)
                    .zip(&self.weights)
                    .map(|(c, w)| {
                        let d0 = c[0] - z0;
                        let d1 = c[1] - z1;
                        w * (-0.5 * (d0 * d0 + d1 * d1)).exp()
                    })
                    .sum()
            }
            _ => self.sq_mahalanobis_terms(x).map(|(w, d2)| w * (-0.5 * d2).exp()).sum(),
        };
        s * self.log_norm.exp()
    }

    /// Natural log of the density, stable where the density underflows.
    pub fn log_eval_point(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for (w, d2) in self.sq_mahalanobis_terms(x) {
            if w > 0.0 {
                max = max.max(w.ln() - 0.5 * d2);
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let s: f64 = self
            .sq_mahalanobis_terms(x)
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, d2)| (w.ln() - 0.5 * d2 - max).exp())
            .sum();
        max + s.ln() + self.log_norm
    }

    /// Pointwise mixture values.
    pub fn eval(&self, pts: &Points) -> Result<Vec<f64>, DensityError> {
        self.check_dim(pts)?;
        Ok((0..pts.len()).into_par_iter().map(|i| self.eval_point(pts.row(i))).collect())
    }

    pub fn log_eval(&self, pts: &Points) -> Result<Vec<f64>, DensityError> {
        self.check_dim(pts)?;
        Ok((0..pts.len()).into_par_iter().map(|i| self.log_eval_point(pts.row(i))).collect())
    }

    fn check_dim(&self, pts: &Points) -> Result<(), DensityError> {
        if pts.dim() != self.dim() {
            return Err(DensityError::DimensionMismatch { expected: self.dim(), got: pts.dim() });
        }
        Ok(())
    }

    /// Standard deviation of the kernel along each axis.
    pub fn kernel_sd(&self) -> Vec<f64> {
        let m = self.dim();
        (0..m).map(|a| self.bandwidth[a * m + a].sqrt()).collect()
    }
}

impl Density for DensityEstimate {
    fn dim(&self) -> usize {
        self.centers.dim()
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        self.eval_point(x)
    }
}

fn apply_lower(l: &[f64], m: usize, x: &[f64]) -> Vec<f64> {
    (0..m).map(|a| (0..=a).map(|b| l[a * m + b] * x[b]).sum()).collect()
}

fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>, DensityError> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                return Err(DensityError::WeightLength { expected: n, got: w.len() });
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(DensityError::InvalidWeights);
            }
            let s: f64 = w.iter().sum();
            if !(s > 0.0) {
                return Err(DensityError::InvalidWeights);
            }
            Ok(w.iter().map(|x| x / s).collect())
        }
    }
}

/// Convenience wrapper for [`DensityEstimate::fit`].
pub fn kde_fit(samples: &Points, weights: Option<&[f64]>, rule: BandwidthRule) -> Result<DensityEstimate, DensityError> {
    DensityEstimate::fit(samples, weights, rule)
}

/// Convenience wrapper for [`DensityEstimate::eval`].
pub fn kde_eval(d: &DensityEstimate, pts: &Points) -> Result<Vec<f64>, DensityError> {
    d.eval(pts)
}

/// Quadrature nodes with positive weights (cell volumes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    nodes: Points,
    weights: Vec<f64>,
    /// Per-axis node coordinates for tensor grids.
    axes: Vec<Vec<f64>>,
}

impl QuadratureGrid {
    /// Midpoint rule on the box `[lo, hi]` with `n[j]` cells on axis `j`.
    pub fn uniform(lo: &[f64], hi: &[f64], n: &[usize]) -> Result<Self, DensityError> {
        if lo.len() != hi.len() || lo.len() != n.len() || lo.is_empty() {
            return Err(DensityError::InvalidGrid("lo, hi and n must share one nonzero length".into()));
        }
        let mut axes = Vec::with_capacity(n.len());
        let mut cell = 1.0;
        for j in 0..n.len() {
            if n[j] < 2 {
                return Err(DensityError::InvalidGrid(format!("axis {j} has {} nodes, need at least 2", n[j])));
            }
            if !(hi[j] > lo[j]) {
                return Err(DensityError::InvalidGrid(format!("axis {j} has empty extent")));
            }
            let h = (hi[j] - lo[j]) / n[j] as f64;
            cell *= h;
            axes.push((0..n[j]).map(|k| lo[j] + (k as f64 + 0.5) * h).collect::<Vec<_>>());
        }
        let nodes = Points::tensor_grid(&axes);
        let weights = vec![cell; nodes.len()];
        Ok(Self { nodes, weights, axes })
    }

    pub fn new(nodes: Points, weights: Vec<f64>) -> Result<Self, DensityError> {
        if nodes.len() != weights.len() {
            return Err(DensityError::InvalidGrid("one weight per node required".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(DensityError::InvalidGrid("weights must be positive".into()));
        }
        Ok(Self { nodes, weights, axes: Vec::new() })
    }

    pub fn nodes(&self) -> &Points {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// Half the L1 distance between two densities, by quadrature, clamped to `[0, 1]`.
pub fn tv_distance(f: &dyn Density, g: &dyn Density, grid: &QuadratureGrid) -> Result<f64, DensityError> {
    let m = grid.nodes().dim();
    for d in [f.dim(), g.dim()] {
        if d != m {
            return Err(DensityError::DimensionMismatch { expected: m, got: d });
        }
    }
    let fv = f.pdf_many(grid.nodes());
    let gv = g.pdf_many(grid.nodes());
    Ok(tv_from_values(&fv, &gv, grid))
}

/// TV distance from density values already evaluated on `grid`.
pub fn tv_from_values(f: &[f64], g: &[f64], grid: &QuadratureGrid) -> f64 {
    let s: f64 = f.iter().zip(g).zip(grid.weights()).map(|((a, b), w)| (a - b).abs() * w).sum();
    (0.5 * s).clamp(0.0, 1.0)
}

/// Indices drawn by accept-reject over the discrete sample set with
/// acceptance probability `r_i / max(r)`.
pub fn resample_indices(r: &[f64], n_out: usize, seed: u64) -> Result<Vec<usize>, DensityError> {
    if r.is_empty() {
        return Err(DensityError::EmptyInput);
    }
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(DensityError::InvalidWeights);
    }
    let max = r.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(DensityError::AllZeroWeights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_out);
    while out.len() < n_out {
        let i = rng.random_range(0..r.len());
        if rng.random::<f64>() * max < r[i] {
            out.push(i);
        }
    }
    Ok(out)
}

/// Resamples points in proportion to `r` (see [`resample_indices`]).
pub fn resample_weighted(samples: &Points, r: &[f64], n_out: usize, seed: u64) -> Result<Points, DensityError> {
    if r.len() != samples.len() {
        return Err(DensityError::WeightLength { expected: samples.len(), got: r.len() });
    }
    Ok(samples.select_rows(&resample_indices(r, n_out, seed)?))
}

/// Brute-force mixture value using an explicit inverse and determinant.
#[cfg(test)]
pub(crate) fn brute_force_mixture(d: &DensityEstimate, x: &[f64]) -> f64 {
    let m = d.dim();
    use nalgebra::DVector;
    let h = DMatrix::from_row_slice(m, m, d.bandwidth());
    let inv = h.clone().try_inverse().unwrap();
    let det = h.determinant();
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).powi(m as i32) * det).sqrt();
    let mut s = 0.0;
    for (c, w) in d.centers().rows().zip(d.weights()) {
        let diff = DVector::from_iterator(m, c.iter().zip(x).map(|(a, b)| b - a));
        let q = (diff.transpose() * &inv * &diff)[(0, 0)];
        s += w * norm * (-0.5 * q).exp();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_cloud(n: usize, m: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(nd.sample(&mut rng) * (1.0 + j as f64) + 0.3 * (i % 3) as f64);
            }
        }
        Points::new(m, data)
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let s = Points::from_scalars(&[0.0, 0.0]);
        for rule in [BandwidthRule::Scott, BandwidthRule::Silverman] {
            assert_eq!(DensityEstimate::fit(&s, None, rule).unwrap_err(), DensityError::DegenerateCovariance);
        }
    }

    #[test]
    fn too_few_and_empty() {
        assert_eq!(kde_fit(&Points::empty(2), None, BandwidthRule::Scott).unwrap_err(), DensityError::EmptyInput);
        assert_eq!(
            kde_fit(&Points::from_scalars(&[1.0]), None, BandwidthRule::Scott).unwrap_err(),
            DensityError::TooFewSamples(1)
        );
        let s = Points::from_scalars(&[1.0, 2.0]);
        assert_eq!(kde_fit(&s, Some(&[0.0, 0.0]), BandwidthRule::Scott).unwrap_err(), DensityError::InvalidWeights);
        assert_eq!(
            kde_fit(&s, Some(&[1.0]), BandwidthRule::Scott).unwrap_err(),
            DensityError::WeightLength { expected: 2, got: 1 }
        );
    }

    #[test]
    fn uniform_weights_match_unweighted() {
        let s = gaussian_cloud(300, 2, 1);
        let a = kde_fit(&s, None, BandwidthRule::Scott).unwrap();
        let w = vec![1.0 / 300.0; 300];
        let b = kde_fit(&s, Some(&w), BandwidthRule::Scott).unwrap();
        let pts = gaussian_cloud(50, 2, 2);
        for (x, y) in a.eval(&pts).unwrap().iter().zip(b.eval(&pts).unwrap()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn evaluation_matches_brute_force_mixture() {
        for m in 1..=3 {
            let s = gaussian_cloud(120, m, 10 + m as u64);
            let w: Vec<f64> = (0..120).map(|i| 1.0 + (i % 7) as f64).collect();
            let d = kde_fit(&s, Some(&w), BandwidthRule::Silverman).unwrap();
            let pts = gaussian_cloud(40, m, 99);
            let got = d.eval(&pts).unwrap();
            for (i, x) in pts.rows().enumerate() {
                let want = brute_force_mixture(&d, x);
                assert!((got[i] - want).abs() <= 1e-12 * want.max(1e-300), "m={m} {} vs {}", got[i], want);
                let lg = d.log_eval_point(x);
                assert!((lg - want.ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_center_peak_is_normalizing_constant() {
        let h = vec![0.5, 0.1, 0.1, 0.3];
        let d = DensityEstimate::with_bandwidth(Points::from_rows(&[[1.0, 2.0]]), vec![1.0], h.clone()).unwrap();
        let det = 0.5 * 0.3 - 0.1 * 0.1;
        let want = 1.0 / (2.0 * std::f64::consts::PI) / f64::sqrt(det);
        assert!((d.eval_point(&[1.0, 2.0]) - want).abs() < 1e-14);
    }

    #[test]
    fn values_are_nonnegative() {
        let d = kde_fit(&gaussian_cloud(200, 2, 4), None, BandwidthRule::Scott).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = Points::new(2, (0..2000).map(|_| rng.random_range(-50.0..50.0)).collect());
        assert!(d.eval(&pts).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let d = kde_fit(&gaussian_cloud(20, 2, 4), None, BandwidthRule::Scott).unwrap();
        assert_eq!(
            d.eval(&Points::from_scalars(&[1.0])).unwrap_err(),
            DensityError::DimensionMismatch { expected: 2, got: 1 }
        );
    }

    fn box_around(d: &DensityEstimate, n: usize) -> QuadratureGrid {
        let sd = d.kernel_sd();
        let b = d.centers().bounds();
        let lo: Vec<f64> = b.iter().zip(&sd).map(|((l, _), s)| l - 8.0 * s).collect();
        let hi: Vec<f64> = b.iter().zip(&sd).map(|((_, h), s)| h + 8.0 * s).collect();
        QuadratureGrid::uniform(&lo, &hi, &vec![n; lo.len()]).unwrap()
    }

    #[test]
    fn integrates_to_one() {
        for (m, n) in [(1, 4000), (2, 300), (3, 60)] {
            let s = gaussian_cloud(150, m, 21);
            let w: Vec<f64> = (0..150).map(|i| (i as f64 * 0.37).sin().abs()).collect();
            for weights in [None, Some(w.as_slice())] {
                let d = kde_fit(&s, weights, BandwidthRule::Scott).unwrap();
                let g = box_around(&d, n);
                let total = g.integrate(&d.eval(g.nodes()).unwrap());
                assert!((0.999..=1.001).contains(&total), "m={m} integral {total}");
            }
        }
    }

    #[test]
    fn grid_requires_two_nodes_per_axis() {
        assert!(QuadratureGrid::uniform(&[0.0], &[1.0], &[1]).is_err());
        assert!(QuadratureGrid::new(Points::from_scalars(&[0.0]), vec![0.0]).is_err());
    }

    #[test]
    fn tv_identity_and_disjoint_boxes() {
        let grid = QuadratureGrid::uniform(&[-1.0, -1.0], &[4.0, 4.0], &[250, 250]).unwrap();
        let d = kde_fit(&gaussian_cloud(100, 2, 3), None, BandwidthRule::Scott).unwrap();
        assert_eq!(tv_distance(&d, &d, &grid).unwrap(), 0.0);
        let a = FnDensity::new(2, |x: &[f64]| if (0.0..1.0).contains(&x[0]) && (0.0..1.0).contains(&x[1]) { 1.0 } else { 0.0 });
        let b = FnDensity::new(2, |x: &[f64]| if (2.0..3.0).contains(&x[0]) && (2.0..3.0).contains(&x[1]) { 1.0 } else { 0.0 });
        let tv = tv_distance(&a, &b, &grid).unwrap();
        assert!((tv - 1.0).abs() < 1e-9, "tv {tv}");
        let c = FnDensity::new(1, |_: &[f64]| 1.0);
        assert!(tv_distance(&a, &c, &grid).is_err());
    }

    #[test]
    fn weighted_kde_converges_to_target() {
        let pdf = |x: f64| {
            let z = (x - 0.5) / 0.7;
            (-0.5 * z * z).exp() / (0.7 * (2.0 * std::f64::consts::PI).sqrt())
        };
        let grid = QuadratureGrid::uniform(&[-4.0], &[4.0], &[800]).unwrap();
        let truth = FnDensity::new(1, |x: &[f64]| pdf(x[0]));
        let mut tvs = Vec::new();
        for n in [100, 1000, 10_000] {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let w: Vec<f64> = s.iter().map(|&x| pdf(x)).collect();
            let d = kde_fit(&Points::from_scalars(&s), Some(&w), BandwidthRule::Scott).unwrap();
            tvs.push(tv_distance(&d, &truth, &grid).unwrap());
        }
        let violations = tvs.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(violations <= 1, "{tvs:?}");
        assert!(tvs[2] < tvs[0]);
    }

    #[test]
    fn resample_with_point_mass() {
        let s = Points::from_scalars(&[1.0, 2.0, 3.0]);
        let out = resample_weighted(&s, &[0.0, 5.0, 0.0], 100, 1).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 2.0));
        assert_eq!(resample_weighted(&s, &[0.0; 3], 10, 1).unwrap_err(), DensityError::AllZeroWeights);
    }

    #[test]
    fn resample_with_unit_weights_is_uniform() {
        let n = 10;
        let idx = resample_indices(&vec![1.0; n], 100_000, 3).unwrap();
        let mut counts = vec![0usize; n];
        for i in idx {
            counts[i] += 1;
        }
        let expect = 10_000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 9 degrees of freedom, 99.9% quantile is 27.9
        assert!(chi2 < 27.9, "chi2 {chi2}");
    }

    #[test]
    fn resampled_mean_matches_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r: Vec<f64> = x.iter().map(|v| (-(v - 1.0) * (v - 1.0)).exp()).collect();
        let want = x.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / r.iter().sum::<f64>();
        let n_out = 100_000;
        let out = resample_weighted(&Points::from_scalars(&x), &r, n_out, 5).unwrap();
        let v = out.as_slice();
        let mean = v.iter().sum::<f64>() / n_out as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n_out - 1) as f64;
        assert!((mean - want).abs() < 3.0 * (var / n_out as f64).sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn serde_round_trip_rebuilds_derived_fields() {
        let d = kde_fit(&gaussian_cloud(30, 2, 6), None, BandwidthRule::Scott).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        let back: DensityEstimate = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tv_is_a_bounded_symmetric_metric(seed_a in 0u64..1000, seed_b in 0u64..1000, shift in -3.0f64..3.0) {
            let grid = QuadratureGrid::uniform(&[-8.0], &[8.0], &[400]).unwrap();
            let a = kde_fit(&gaussian_cloud(40, 1, seed_a), None, BandwidthRule::Scott).unwrap();
            let sb = gaussian_cloud(40, 1, seed_b);
            let sb = Points::from_scalars(&sb.as_slice().iter().map(|x| x + shift).collect::<Vec<_>>());
            let b = kde_fit(&sb, None, BandwidthRule::Silverman).unwrap();
            let ab = tv_distance(&a, &b, &grid).unwrap();
            let ba = tv_distance(&b, &a, &grid).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert_eq!(tv_distance(&a, &a, &grid).unwrap(), 0.0);
        }
    }
}
