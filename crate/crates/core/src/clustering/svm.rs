//! Soft-margin Gaussian-kernel SVM: SMO with second-order working-set
//! selection, one-vs-one voting for more than two classes, and grid search by
//! k-fold cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::points::{sq_dist, Points};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmSettings {
    /// Margin penalties tried during cross-validation.
    pub c_grid: Vec<f64>,
    /// Kernel scales tried, as multiples of `1 / n_features` on standardized
    /// features.
    pub gamma_grid: Vec<f64>,
    pub folds: usize,
    /// KKT violation tolerance for SMO.
    pub eps: f64,
    pub min_per_label: usize,
}

impl Default for SvmSettings {
    fn default() -> Self {
        Self {
            c_grid: vec![1.0, 10.0, 100.0, 1000.0],
            gamma_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 5,
            eps: 1e-5,
            min_per_label: 5,
        }
    }
}

/// Binary decision `f(x) = sum coef_i K(sv_i, x) - rho`; positive votes for
/// `pos`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub pos: usize,
    pub neg: usize,
    pub support: Points,
    pub coef: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmClassifier {
    pub n_labels: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub gamma: f64,
    pub c: f64,
    pub machines: Vec<BinarySvm>,
    pub cv_accuracy: f64,
    pub train_accuracy: f64,
}

impl SvmClassifier {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn predict_one(&self, x: &[f64]) -> usize {
        let z = self.standardize(x);
        vote(self.n_labels, &self.machines, |m| {
            let f: f64 = m
                .support
                .rows()
                .zip(&m.coef)
                .map(|(sv, c)| c * (-self.gamma * sq_dist(sv, &z)).exp())
                .sum();
            f - m.rho
        })
    }

    pub fn predict(&self, rows: &Points) -> Result<Vec<usize>, ClusterError> {
        if rows.dim() != self.n_features() {
            return Err(ClusterError::DimensionMismatch { expected: self.n_features(), got: rows.dim() });
        }
        Ok((0..rows.len()).into_par_iter().map(|i| self.predict_one(rows.row(i))).collect())
    }
}

/// One-vs-one vote; ties go to the smaller label.
fn vote(n_labels: usize, machines: &[BinarySvm], decision: impl Fn(&BinarySvm) -> f64) -> usize {
    let mut votes = vec![0usize; n_labels];
    for m in machines {
        if decision(m) > 0.0 {
            votes[m.pos] += 1;
        } else {
            votes[m.neg] += 1;
        }
    }
    let mut best = 0;
    for (k, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = k;
        }
    }
    best
}

/// Solution of one binary dual: multipliers over `idx` and the offset.
struct DualSolution {
    alpha: Vec<f64>,
    rho: f64,
}

/// SMO on `min 0.5 a'Qa - e'a`, `0 <= a <= c`, `y'a = 0` with
/// `Q_ij = y_i y_j K(idx_i, idx_j)`.
fn smo(kernel: &[f64], n_all: usize, idx: &[usize], y: &[f64], c: f64, eps: f64) -> DualSolution {
    let n = idx.len();
    let k = |a: usize, b: usize| kernel[idx[a] * n_all + idx[b]];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = 10_000_000usize.max(100 * n);
    let up = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] < c) || (y[t] < 0.0 && a[t] > 0.0);
    let low = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] > 0.0) || (y[t] < 0.0 && a[t] < c);
    for _ in 0..max_iter {
        let mut i = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if up(t, &alpha) && -y[t] * grad[t] > g_max {
                g_max = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut j = usize::MAX;
        let mut g_min = f64::INFINITY;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            if !low(t, &alpha) {
                continue;
            }
            let v = -y[t] * grad[t];
            g_min = g_min.min(v);
            let b = g_max - v;
            if b > 0.0 {
                let a = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(1e-12);
                let obj = -b * b / a;
                if obj < best_obj {
                    best_obj = obj;
                    j = t;
                }
            }
        }
        if g_max - g_min < eps || j == usize::MAX {
            break;
        }
        let a = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(1e-12);
        let b = -y[i] * grad[i] + y[j] * grad[j];
        let mut step = b / a;
        step = step.min(if y[i] > 0.0 { c - alpha[i] } else { alpha[i] });
        step = step.min(if y[j] > 0.0 { alpha[j] } else { c - alpha[j] });
        alpha[i] = (alpha[i] + y[i] * step).clamp(0.0, c);
        alpha[j] = (alpha[j] - y[j] * step).clamp(0.0, c);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += y[t] * step * (k(t, i) - k(t, j));
        }
    }
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { 0.5 * (ub + lb) };
    DualSolution { alpha, rho }
}

/// One-vs-one machines trained on the samples `subset` of the standardized
/// training set.
fn train_ovo(kernel: &[f64], z: &Points, labels: &[usize], n_labels: usize, subset: &[usize], c: f64, eps: f64) -> Vec<BinarySvm> {
    let n_all = z.len();
    let mut machines = Vec::new();
    for pos in 0..n_labels {
        for neg in pos + 1..n_labels {
            let idx: Vec<usize> = subset.iter().copied().filter(|&t| labels[t] == pos || labels[t] == neg).collect();
            let y: Vec<f64> = idx.iter().map(|&t| if labels[t] == pos { 1.0 } else { -1.0 }).collect();
            let has_both = y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0);
            let (alpha, rho) = if has_both {
                let s = smo(kernel, n_all, &idx, &y, c, eps);
                (s.alpha, s.rho)
            } else {
                // one-sided training set: constant decision for the present class
                (vec![0.0; idx.len()], if y.first().is_some_and(|&v| v > 0.0) { -1.0 } else { 1.0 })
            };
            let mut support = Points::empty(z.dim());
            let mut coef = Vec::new();
            for (p, &t) in idx.iter().enumerate() {
                if alpha[p] > 0.0 {
                    support.push(z.row(t));
                    coef.push(y[p] * alpha[p]);
                }
            }
            machines.push(BinarySvm { pos, neg, support, coef, rho });
        }
    }
    machines
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb)
}

/// Content hash of a labelled row; fold assignment depends only on the data,
/// never on sample order.
fn row_hash(row: &[f64], label: usize) -> u64 {
    row.iter().fold(mix(0, label as u64), |h, v| mix(h, v.to_bits()))
}

/// Distinct `(row, label)` pairs in a canonical order.
fn canonical_training_set(rows: &Points, labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let key = |i: usize| (labels[i], rows.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    order.sort_by_cached_key(|&i| key(i));
    order.dedup_by(|a, b| labels[*a] == labels[*b] && rows.row(*a).iter().zip(rows.row(*b)).all(|(x, y)| x.to_bits() == y.to_bits()));
    order
}

fn kernel_matrix(d2: &[f64], gamma: f64) -> Vec<f64> {
    d2.par_iter().map(|v| (-gamma * v).exp()).collect()
}

/// Trains a classifier, choosing the margin penalty and kernel scale by
/// cross-validation accuracy.
pub fn train_classifier(rows: &Points, labels: &[usize], settings: &SvmSettings) -> Result<SvmClassifier, ClusterError> {
    if rows.len() != labels.len() {
        return Err(ClusterError::LengthMismatch { rows: rows.len(), labels: labels.len() });
    }
    if settings.c_grid.is_empty() || settings.gamma_grid.is_empty() || settings.folds < 2 {
        return Err(ClusterError::InvalidConfig("empty hyperparameter grid or fewer than 2 folds".into()));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_labels];
    for &l in labels {
        counts[l] += 1;
    }
    if n_labels < 2 {
        return Err(ClusterError::DegenerateLabels { label: 0, count: counts.first().copied().unwrap_or(0), needed: settings.min_per_label });
    }
    if let Some((label, &count)) = counts.iter().enumerate().find(|(_, &c)| c < settings.min_per_label) {
        return Err(ClusterError::DegenerateLabels { label, count, needed: settings.min_per_label });
    }

    let keep = canonical_training_set(rows, labels);
    let dim = rows.dim();
    let n = keep.len();
    let mut mean = vec![0.0; dim];
    for &i in &keep {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; dim];
    for &i in &keep {
        for ((s, v), m) in scale.iter_mut().zip(rows.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let mut z = Points::empty(dim);
    let mut y = Vec::with_capacity(n);
    for &i in &keep {
        let row: Vec<f64> = rows.row(i).iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect();
        z.push(&row);
        y.push(labels[i]);
    }
    let d2: Vec<f64> = (0..n * n).into_par_iter().map(|p| sq_dist(z.row(p / n), z.row(p % n))).collect();
    let folds: Vec<usize> = keep.iter().map(|&i| (row_hash(rows.row(i), labels[i]) % settings.folds as u64) as usize).collect();
    let gamma_unit = 1.0 / dim.max(1) as f64;

    let mut best: Option<(f64, f64, f64)> = None;
    for &g in &settings.gamma_grid {
        let gamma = g * gamma_unit;
        let kernel = kernel_matrix(&d2, gamma);
        for &c in &settings.c_grid {
            let correct: usize = (0..settings.folds)
                .into_par_iter()
                .map(|f| {
                    let train: Vec<usize> = (0..n).filter(|&t| folds[t] != f).collect();
                    let machines = train_ovo(&kernel, &z, &y, n_labels, &train, c, settings.eps);
                    (0..n)
                        .filter(|&t| folds[t] == f)
                        .filter(|&t| {
                            let pred = vote(n_labels, &machines, |m| {
                                m.support.rows().zip(&m.coef).map(|(sv, cf)| cf * (-gamma * sq_dist(sv, z.row(t))).exp()).sum::<f64>() - m.rho
                            });
                            pred == y[t]
                        })
                        .count()
                })
                .sum();
            let acc = correct as f64 / n as f64;
            if best.is_none_or(|(a, _, _)| acc > a) {
                best = Some((acc, c, gamma));
            }
        }
    }
    let (cv_accuracy, c, gamma) = best.expect("grid is nonempty");
    let kernel = kernel_matrix(&d2, gamma);
    let all: Vec<usize> = (0..n).collect();
    let machines = train_ovo(&kernel, &z, &y, n_labels, &all, c, settings.eps);
    let mut model = SvmClassifier { n_labels, mean, scale, gamma, c, machines, cv_accuracy, train_accuracy: 0.0 };
    let pred = model.predict(rows)?;
    model.train_accuracy = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    Ok(model)
}
