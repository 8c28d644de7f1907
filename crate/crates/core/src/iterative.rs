//! Sequential updates of the cumulative ratio from a stream of filtered data
//! sets (time steps or experiments), with diagnostic gating, QoI dimension
//! fallback and an optional significance check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{BandwidthRule, DensityError, DensityEstimate};
use crate::ensemble::FilteredEnsemble;
use crate::inversion::{self, Decision, InversionError, InversionState, IterationRecord};
use crate::kpca::{kpca, qoi_eval, KernelSpec, KpcaError, QoiMap};

#[derive(Debug, Error, PartialEq)]
pub enum IterativeError {
    #[error("state has {state} samples but the predicted ensemble has {pred}")]
    LengthMismatch { state: usize, pred: usize },
    #[error("QoI dimension must be at least 1")]
    ZeroDimension,
    #[error(transparent)]
    Kpca(#[from] KpcaError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
}

pub const DEFAULT_TOL: f64 = 0.095;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    /// Requested QoI dimension; lowered one at a time on failure.
    pub d: usize,
    pub tol: f64,
    /// Also discard steps that do not raise the mean squared ratio.
    pub significance_check: bool,
    pub kernel: KernelSpec,
    pub bandwidth: BandwidthRule,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self { d: 2, tol: DEFAULT_TOL, significance_check: false, kernel: KernelSpec::default(), bandwidth: BandwidthRule::Scott }
    }
}

/// Outcome of one candidate QoI dimension.
enum Candidate {
    Ok { r: Vec<f64>, diagnostic: f64, significance: f64 },
    /// Diagnostic outside tolerance.
    OffTarget { diagnostic: f64, significance: f64 },
    /// kPCA rank too low or predicted density vanished at a sample.
    Infeasible,
}

fn candidate(
    state: &InversionState,
    pred: &FilteredEnsemble,
    obs: &FilteredEnsemble,
    q: usize,
    cfg: &IterateConfig,
) -> Result<(Candidate, Option<QoiMap>), IterativeError> {
    let map = match kpca(pred, &cfg.kernel, q) {
        Ok(m) => m,
        Err(KpcaError::RankDeficient { .. }) => return Ok((Candidate::Infeasible, None)),
        Err(e) => return Err(e.into()),
    };
    let q_pred = map.training_scores().clone();
    let q_obs = qoi_eval(&map, obs)?;
    let pi_pred = DensityEstimate::fit(&q_pred, Some(&state.r), cfg.bandwidth)?;
    let pi_obs = DensityEstimate::fit(&q_obs, None, cfg.bandwidth)?;
    let r = match inversion::ratio_product(&pi_obs, &pi_pred, &q_pred, &state.r) {
        Ok(r) => r,
        Err(InversionError::PredZeroAtSample { .. }) => return Ok((Candidate::Infeasible, Some(map))),
        Err(e) => return Err(e.into()),
    };
    let diagnostic = inversion::diagnostic(&r)?;
    let significance = inversion::significance(&r)?;
    let c = if (1.0 - diagnostic).abs() > cfg.tol {
        Candidate::OffTarget { diagnostic, significance }
    } else {
        Candidate::Ok { r, diagnostic, significance }
    };
    Ok((c, Some(map)))
}

/// One update step. On acceptance `state.r` becomes the product of the new
/// and previous ratios; on discard it is left untouched. The record is
/// appended to `state.history` and also returned along with the accepted map.
pub fn iterate(
    state: &mut InversionState,
    label: &str,
    pred: &FilteredEnsemble,
    obs: &FilteredEnsemble,
    cfg: &IterateConfig,
) -> Result<(IterationRecord, Option<QoiMap>), IterativeError> {
    if cfg.d == 0 {
        return Err(IterativeError::ZeroDimension);
    }
    if state.len() != pred.len() {
        return Err(IterativeError::LengthMismatch { state: state.len(), pred: pred.len() });
    }
    let mut last = (f64::NAN, f64::NAN);
    let mut outcome = None;
    for q in (1..=cfg.d.min(pred.len().saturating_sub(1)).max(1)).rev() {
        match candidate(state, pred, obs, q, cfg)? {
            (Candidate::Ok { r, diagnostic, significance }, map) => {
                last = (diagnostic, significance);
                outcome = Some((q, r, map));
                break;
            }
            (Candidate::OffTarget { diagnostic, significance }, _) => last = (diagnostic, significance),
            (Candidate::Infeasible, _) => {}
        }
    }
    let (diagnostic, significance) = last;
    let (record, map) = match outcome {
        Some((q, r, map)) if !cfg.significance_check || significance > inversion::significance(&state.r)? => {
            state.r = r;
            let decision = if q == cfg.d { Decision::Accepted } else { Decision::Reduced };
            (IterationRecord { label: label.to_string(), d_used: q, diagnostic, significance, decision }, map)
        }
        _ => (IterationRecord { label: label.to_string(), d_used: 0, diagnostic, significance, decision: Decision::Discarded }, None),
    };
    log::info!("step {label}: {:?} (d = {}, mean r = {diagnostic:.4})", record.decision, record.d_used);
    state.history.push(record.clone());
    Ok((record, map))
}

/// Runs [`iterate`] over a sequence of `(label, predicted, observed)` steps.
pub fn iterate_all<'a, I>(state: &mut InversionState, steps: I, cfg: &IterateConfig) -> Result<Vec<IterationRecord>, IterativeError>
where
    I: IntoIterator<Item = (String, &'a FilteredEnsemble, &'a FilteredEnsemble)>,
{
    steps.into_iter().map(|(label, p, o)| iterate(state, &label, p, o, cfg).map(|(rec, _)| rec)).collect()
}
