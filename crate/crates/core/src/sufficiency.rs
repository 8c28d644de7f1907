//! Regression test comparing the kPCA eigenvectors learned on two filtered
//! coordinate sets over the same parameter samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kpca::QoiMap;

#[derive(Debug, Error, PartialEq)]
pub enum SufficiencyError {
    #[error("alpha vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("maps have {0} and {1} components")]
    ComponentMismatch(usize, usize),
}

/// Least-squares line `beta ~ slope * alpha + intercept` for one component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub coarse_id: String,
    pub fine_id: String,
    pub components: Vec<ComponentFit>,
    pub slope_thresh: f64,
    pub r2_thresh: f64,
    pub pass: bool,
}

/// Fits `y ~ slope * x + intercept` after scaling both to unit 2-norm.
pub fn regress_normalized(x: &[f64], y: &[f64]) -> Result<ComponentFit, SufficiencyError> {
    if x.len() != y.len() {
        return Err(SufficiencyError::LengthMismatch(x.len(), y.len()));
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| if n > 0.0 { a / n } else { 0.0 }).collect::<Vec<_>>()
    };
    let (x, y) = (unit(x), unit(y));
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Ok(ComponentFit { slope: 0.0, intercept: my, r_squared: 0.0 });
    }
    let slope = sxy / sxx;
    let r_squared = (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0);
    Ok(ComponentFit { slope, intercept: my - slope * mx, r_squared })
}

/// Regresses the unit-normalized `alpha` vectors of `map_b` on those of
/// `map_a`, component by component in eigenvalue order.
pub fn sufficiency_test(
    map_a: &QoiMap,
    map_b: &QoiMap,
    slope_thresh: f64,
    r2_thresh: f64,
) -> Result<SufficiencyReport, SufficiencyError> {
    if map_a.q() != map_b.q() {
        return Err(SufficiencyError::ComponentMismatch(map_a.q(), map_b.q()));
    }
    let components = (0..map_a.q())
        .map(|i| regress_normalized(map_a.alpha(i), map_b.alpha(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let pass = components.iter().all(|c| c.slope.abs() >= slope_thresh && c.r_squared >= r2_thresh);
    Ok(SufficiencyReport {
        coarse_id: format!("{} filtered coordinates", map_a.coords().len()),
        fine_id: format!("{} filtered coordinates", map_b.coords().len()),
        components,
        slope_thresh,
        r2_thresh,
        pass,
    })
}
