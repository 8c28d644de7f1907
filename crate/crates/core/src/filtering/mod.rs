//! Per-sample signal fitting (RBF surfaces or 1-D splines) and evaluation on a
//! common set of filtered coordinates.

pub mod lm;
pub mod rbf;
pub mod spline;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{DataEnsemble, FilteredEnsemble};
use crate::points::Points;

pub use rbf::{fit_rbf, RbfModel, RbfSettings, Trend};
pub use spline::{fit_spline1d, spline_path, SplineModel, SplineSettings};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("need at least {needed} data points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("least-squares solver diverged after {restarts} restarts")]
    SolverDivergence { restarts: usize },
    #[error("times must be strictly increasing (violated at index {index})")]
    NonMonotoneTimes { index: usize },
    #[error("{coords} coordinates but {values} values")]
    LengthMismatch { coords: usize, values: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("sample {index}: {source}")]
    Sample { index: usize, source: Box<FilterError> },
}

/// `new` is a strict improvement on `best` beyond rounding noise at `scale`.
pub(crate) fn improves(new: f64, best: f64, scale: f64) -> bool {
    new < best - 1e-12 * scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterModel {
    Rbf(RbfModel),
    Spline1d(SplineModel),
}

impl FilterModel {
    pub fn dim(&self) -> usize {
        match self {
            FilterModel::Rbf(m) => m.dim,
            FilterModel::Spline1d(_) => 1,
        }
    }

    pub fn n_terms(&self) -> usize {
        match self {
            FilterModel::Rbf(m) => m.n_terms(),
            FilterModel::Spline1d(m) => m.n_interior(),
        }
    }

    pub fn fit_sse(&self) -> f64 {
        match self {
            FilterModel::Rbf(m) => m.fit_sse,
            FilterModel::Spline1d(m) => m.fit_sse,
        }
    }
}

/// Evaluates a fitted model at `coords`.
pub fn evaluate_filter(model: &FilterModel, coords: &Points) -> Result<Vec<f64>, FilterError> {
    if coords.dim() != model.dim() {
        return Err(FilterError::DimensionMismatch { expected: model.dim(), got: coords.dim() });
    }
    Ok(match model {
        FilterModel::Rbf(m) => coords.rows().map(|x| m.eval_point(x)).collect(),
        FilterModel::Spline1d(m) => coords.rows().map(|x| m.eval_point(x[0])).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum FilterMethod {
    Rbf(RbfSettings),
    Spline(SplineSettings),
}

impl Default for FilterMethod {
    fn default() -> Self {
        FilterMethod::Rbf(RbfSettings::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub method: FilterMethod,
    /// Seeds the RBF center initialization; sample `i` uses a stream derived
    /// from this and `i`.
    pub seed: u64,
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Fits one sample's data.
pub fn fit_sample(coords: &Points, values: &[f64], config: &FilterConfig, index: usize) -> Result<FilterModel, FilterError> {
    match &config.method {
        FilterMethod::Rbf(s) => {
            crate::instrument::filter_fit();
            fit_rbf(coords, values, s, sample_seed(config.seed, index)).map(FilterModel::Rbf)
        }
        FilterMethod::Spline(s) => {
            if coords.dim() != 1 {
                return Err(FilterError::DimensionMismatch { expected: 1, got: coords.dim() });
            }
            fit_spline1d(coords.as_slice(), values, s).map(FilterModel::Spline1d)
        }
    }
}

/// Fits every sample independently and evaluates each fit at
/// `filtered_coords`. Rows follow the ensemble order.
pub fn filter_ensemble_models(
    ensemble: &DataEnsemble,
    filtered_coords: &Points,
    config: &FilterConfig,
) -> Result<(FilteredEnsemble, Vec<FilterModel>), FilterError> {
    if filtered_coords.dim() != ensemble.dim() {
        return Err(FilterError::DimensionMismatch { expected: ensemble.dim(), got: filtered_coords.dim() });
    }
    let fitted: Vec<Result<(FilterModel, Vec<f64>), FilterError>> = ensemble
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let wrap = |e| FilterError::Sample { index: i, source: Box::new(e) };
            let model = fit_sample(&s.coords, &s.values, config, i).map_err(wrap)?;
            let row = evaluate_filter(&model, filtered_coords).map_err(wrap)?;
            Ok((model, row))
        })
        .collect();
    let mut models = Vec::with_capacity(fitted.len());
    let mut data = Vec::with_capacity(fitted.len() * filtered_coords.len());
    for f in fitted {
        let (m, row) = f?;
        models.push(m);
        data.extend(row);
    }
    Ok((FilteredEnsemble::new(filtered_coords.clone(), Points::new(filtered_coords.len(), data)), models))
}

/// [`filter_ensemble_models`] without the models.
pub fn filter_ensemble(ensemble: &DataEnsemble, filtered_coords: &Points, config: &FilterConfig) -> Result<FilteredEnsemble, FilterError> {
    filter_ensemble_models(ensemble, filtered_coords, config).map(|(f, _)| f)
}
