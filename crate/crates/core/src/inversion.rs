//! Density-ratio updates, the predictability diagnostic and the clustered
//! update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{DensityError, DensityEstimate};
use crate::points::Points;

/// Predicted density values below this are treated as predictability
/// violations.
pub const PRED_FLOOR: f64 = 1e-14;

/// Samples whose cumulative weight is below this fraction of the largest one
/// are outside the support of the current predicted density.
pub const SUPPORT_FRACTION: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum InversionError {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("predicted density vanishes at {} sample(s), first indices {:?}", indices.len(), &indices[..indices.len().min(10)])]
    PredZeroAtSample { indices: Vec<usize> },
    #[error("cluster {0} has no initial samples")]
    EmptyCluster(usize),
    #[error("cluster weights must be nonnegative, sum to 1 and match the cluster count")]
    WeightMismatch,
    #[error("cluster memberships do not partition the {0} initial samples")]
    NotAPartition(usize),
    #[error("cluster {0} carries observed weight but has no observed density")]
    MissingObserved(usize),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    /// Accepted at the requested QoI dimension.
    Accepted,
    /// Accepted after lowering the QoI dimension.
    Reduced,
    Discarded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub label: String,
    /// QoI dimension used; 0 when discarded.
    pub d_used: usize,
    /// Mean of the cumulative ratio (of the last candidate when discarded).
    pub diagnostic: f64,
    /// Mean of the squared cumulative ratio (of the last candidate when discarded).
    pub significance: f64,
    pub decision: Decision,
}

/// Initial parameter samples together with their cumulative ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionState {
    pub params: Points,
    pub r: Vec<f64>,
    pub history: Vec<IterationRecord>,
}

impl InversionState {
    pub fn new(params: Points) -> Self {
        let n = params.len();
        Self { params, r: vec![1.0; n], history: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn diagnostic(&self) -> f64 {
        diagnostic(&self.r).unwrap_or(f64::NAN)
    }

    pub fn significance(&self) -> f64 {
        significance(&self.r).unwrap_or(f64::NAN)
    }

    pub fn accepted_labels(&self) -> Vec<&str> {
        self.history
            .iter()
            .filter(|h| h.decision != Decision::Discarded)
            .map(|h| h.label.as_str())
            .collect()
    }
}

fn check_dims(obs: &DensityEstimate, pred: &DensityEstimate, q: &Points) -> Result<(), InversionError> {
    for got in [obs.dim(), q.dim()] {
        if got != pred.dim() {
            return Err(InversionError::DimensionMismatch { expected: pred.dim(), got });
        }
    }
    Ok(())
}

/// `r_j = obs(q_j) / pred(q_j)` at every predicted QoI sample.
pub fn compute_ratio(obs: &DensityEstimate, pred: &DensityEstimate, q_pred: &Points) -> Result<Vec<f64>, InversionError> {
    check_dims(obs, pred, q_pred)?;
    let p = pred.eval(q_pred)?;
    let bad: Vec<usize> = p.iter().enumerate().filter(|(_, v)| !(**v >= PRED_FLOOR)).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(InversionError::PredZeroAtSample { indices: bad });
    }
    let o = obs.eval(q_pred)?;
    Ok(o.iter().zip(&p).map(|(a, b)| a / b).collect())
}

/// `r_new_j * prior_j`, evaluated in log space.
///
/// Samples whose prior weight is below [`SUPPORT_FRACTION`] of the largest are
/// outside the support of the weighted predicted density; their product is set
/// to zero and the predictability floor is enforced only on the rest.
pub fn ratio_product(
    obs: &DensityEstimate,
    pred: &DensityEstimate,
    q_pred: &Points,
    prior: &[f64],
) -> Result<Vec<f64>, InversionError> {
    check_dims(obs, pred, q_pred)?;
    if prior.len() != q_pred.len() {
        return Err(InversionError::DimensionMismatch { expected: q_pred.len(), got: prior.len() });
    }
    let max = prior.iter().cloned().fold(0.0, f64::max);
    let floor_ln = PRED_FLOOR.ln();
    let out: Vec<Result<f64, usize>> = (0..q_pred.len())
        .into_par_iter()
        .map(|j| {
            if !(prior[j] >= SUPPORT_FRACTION * max) || prior[j] <= 0.0 {
                return Ok(0.0);
            }
            let x = q_pred.row(j);
            let lp = pred.log_eval_point(x);
            if !(lp >= floor_ln) {
                return Err(j);
            }
            let lo = obs.log_eval_point(x);
            Ok((lo - lp + prior[j].ln()).exp())
        })
        .collect();
    let bad: Vec<usize> = out.iter().filter_map(|v| v.err()).collect();
    if !bad.is_empty() {
        return Err(InversionError::PredZeroAtSample { indices: bad });
    }
    Ok(out.into_iter().map(|v| v.unwrap()).collect())
}

/// Sample mean of `r`; close to 1 when the predictability assumption holds.
pub fn diagnostic(r: &[f64]) -> Result<f64, InversionError> {
    if r.is_empty() {
        return Err(InversionError::EmptyInput);
    }
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Sample mean of `r^2`, accumulated as `mean^2 + variance` so that it never
/// falls below `diagnostic(r)^2` through rounding.
pub fn significance(r: &[f64]) -> Result<f64, InversionError> {
    let mean = diagnostic(r)?;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r.len() as f64;
    Ok(mean * mean + var)
}

/// Inputs for one cluster of a clustered update.
#[derive(Clone, Debug)]
pub struct ClusterInput {
    /// Indices of the initial samples assigned to this cluster.
    pub members: Vec<usize>,
    /// `None` when no observed data fall in the cluster.
    pub obs: Option<DensityEstimate>,
    pub pred: DensityEstimate,
    /// QoI values of the members, in `members` order.
    pub q: Points,
}

/// Per-sample weights `w_k (N / N_k) r_k(q)` for a partition of `n` initial
/// samples into clusters.
pub fn clustered_update(n: usize, clusters: &[ClusterInput], w: &[f64]) -> Result<Vec<f64>, InversionError> {
    if clusters.is_empty() || n == 0 {
        return Err(InversionError::EmptyInput);
    }
    if w.len() != clusters.len() || w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(InversionError::WeightMismatch);
    }
    let mut seen = vec![false; n];
    for (k, c) in clusters.iter().enumerate() {
        if c.members.is_empty() {
            return Err(InversionError::EmptyCluster(k));
        }
        if c.q.len() != c.members.len() {
            return Err(InversionError::DimensionMismatch { expected: c.members.len(), got: c.q.len() });
        }
        for &i in &c.members {
            if i >= n || seen[i] {
                return Err(InversionError::NotAPartition(n));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(InversionError::NotAPartition(n));
    }
    let mut out = vec![0.0; n];
    for (k, c) in clusters.iter().enumerate() {
        if w[k] == 0.0 {
            continue;
        }
        let obs = c.obs.as_ref().ok_or(InversionError::MissingObserved(k))?;
        let r = compute_ratio(obs, &c.pred, &c.q)?;
        let scale = w[k] * n as f64 / c.members.len() as f64;
        for (&i, rv) in c.members.iter().zip(r) {
            out[i] = scale * rv;
        }
    }
    Ok(out)
}
