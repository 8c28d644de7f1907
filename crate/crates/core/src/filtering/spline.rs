//! Piecewise-linear splines with free interior knots for 1-D time series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{minimize, LeastSquares, LmOptions};
use super::{improves, FilterError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub rel_tol: f64,
}

impl Default for SplineSettings {
    fn default() -> Self {
        Self { k_min: 1, k_max: 10, rel_tol: 0.01 }
    }
}

/// Knots (first and last pinned to the data range) and the spline values
/// there. Constant beyond the end knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub fit_sse: f64,
}

impl SplineModel {
    pub fn n_interior(&self) -> usize {
        self.knots.len() - 2
    }

    pub fn eval_point(&self, t: f64) -> f64 {
        interpolate(&self.knots, &self.values, t)
    }
}

fn interpolate(knots: &[f64], values: &[f64], t: f64) -> f64 {
    let last = knots.len() - 1;
    if t <= knots[0] {
        return values[0];
    }
    if t >= knots[last] {
        return values[last];
    }
    let j = knots.partition_point(|&k| k <= t).clamp(1, last);
    let (a, b) = (knots[j - 1], knots[j]);
    if b <= a {
        return values[j];
    }
    let u = (t - a) / (b - a);
    values[j - 1] * (1.0 - u) + values[j] * u
}

/// Hat-basis design matrix for `knots` at `times`.
fn design(knots: &[f64], times: &[f64]) -> DMatrix<f64> {
    let k = knots.len();
    let mut a = DMatrix::zeros(times.len(), k);
    for (i, &t) in times.iter().enumerate() {
        if t <= knots[0] {
            a[(i, 0)] = 1.0;
            continue;
        }
        if t >= knots[k - 1] {
            a[(i, k - 1)] = 1.0;
            continue;
        }
        let j = knots.partition_point(|&x| x <= t).clamp(1, k - 1);
        let (lo, hi) = (knots[j - 1], knots[j]);
        if hi <= lo {
            a[(i, j)] = 1.0;
            continue;
        }
        let u = (t - lo) / (hi - lo);
        a[(i, j - 1)] = 1.0 - u;
        a[(i, j)] = u;
    }
    a
}

/// Knot values by ridge-stabilized linear least squares.
fn knot_values(knots: &[f64], times: &[f64], y: &[f64]) -> Vec<f64> {
    let a = design(knots, times);
    let mut ata = a.tr_mul(&a);
    let ridge = 1e-12 * (ata.trace() / ata.nrows() as f64).max(1e-300);
    for j in 0..ata.nrows() {
        ata[(j, j)] += ridge;
    }
    let rhs = a.tr_mul(&DVector::from_column_slice(y));
    match ata.cholesky() {
        Some(ch) => ch.solve(&rhs).iter().cloned().collect(),
        None => vec![0.0; knots.len()],
    }
}

fn sse_for(knots: &[f64], values: &[f64], times: &[f64], y: &[f64]) -> f64 {
    times.iter().zip(y).map(|(&t, v)| (interpolate(knots, values, t) - v).powi(2)).sum()
}

struct KnotProblem<'a> {
    times: &'a [f64],
    y: &'a [f64],
}

impl KnotProblem<'_> {
    fn knots(&self, interior: &[f64]) -> Vec<f64> {
        let mut k = Vec::with_capacity(interior.len() + 2);
        k.push(self.times[0]);
        let mut inner = interior.to_vec();
        inner.sort_by(f64::total_cmp);
        k.extend(inner);
        k.push(*self.times.last().unwrap());
        k
    }
}

impl LeastSquares for KnotProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.times.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let knots = self.knots(p);
        let v = knot_values(&knots, self.times, self.y);
        for (i, (&t, y)) in self.times.iter().zip(self.y).enumerate() {
            out[i] = interpolate(&knots, &v, t) - y;
        }
    }
}

fn optimize(problem: &KnotProblem, start: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let (t0, t1) = (problem.times[0], *problem.times.last().unwrap());
    let lo = vec![t0; start.len()];
    let hi = vec![t1; start.len()];
    let r = minimize(problem, start, &lo, &hi, &LmOptions { max_iter: 100, ftol: 1e-10, xtol: 1e-12 });
    let knots = problem.knots(&r.params);
    let values = knot_values(&knots, problem.times, problem.y);
    let sse = sse_for(&knots, &values, problem.times, problem.y);
    (knots, values, sse)
}

/// Inserts one knot at the midpoint of the interval with the largest SSE.
fn insert_knot(knots: &[f64], values: &[f64], times: &[f64], y: &[f64]) -> Vec<f64> {
    let mut worst = (0, -1.0);
    for j in 1..knots.len() {
        let (a, b) = (knots[j - 1], knots[j]);
        let e: f64 = times
            .iter()
            .zip(y)
            .filter(|(t, _)| **t >= a && **t <= b)
            .map(|(&t, v)| (interpolate(knots, values, t) - v).powi(2))
            .sum();
        if e > worst.1 && b > a {
            worst = (j, e);
        }
    }
    let j = worst.0.max(1);
    let mut out = knots[1..knots.len() - 1].to_vec();
    out.push(0.5 * (knots[j - 1] + knots[j]));
    out.sort_by(f64::total_cmp);
    out
}

/// Best spline with `k` interior knots from an equispaced start and, when a
/// fit with `k - 1` knots is given, from that fit with one knot inserted.
fn fit_with_knots(problem: &KnotProblem, k: usize, prev: Option<&SplineModel>) -> SplineModel {
    let (times, values) = (problem.times, problem.y);
    let (t0, t1) = (times[0], *times.last().unwrap());
    let equi: Vec<f64> = (1..=k).map(|i| t0 + (t1 - t0) * i as f64 / (k + 1) as f64).collect();
    let (mut knots, mut vals, mut sse) = optimize(problem, &equi);
    if let Some(p) = prev {
        let warm = insert_knot(&p.knots, &p.values, times, values);
        // the inserted knot keeps the previous spline unchanged
        let mut warm_knots = problem.knots(&warm);
        let mut warm_vals: Vec<f64> = warm_knots.iter().map(|&t| p.eval_point(t)).collect();
        let mut warm_sse = sse_for(&warm_knots, &warm_vals, times, values);
        let (ok, ov, os) = optimize(problem, &warm);
        if os < warm_sse {
            (warm_knots, warm_vals, warm_sse) = (ok, ov, os);
        }
        if warm_sse < sse {
            (knots, vals, sse) = (warm_knots, warm_vals, warm_sse);
        }
    }
    SplineModel { knots, values: vals, fit_sse: sse }
}

fn validate(times: &[f64], values: &[f64], s: &SplineSettings) -> Result<(), FilterError> {
    if times.len() != values.len() {
        return Err(FilterError::LengthMismatch { coords: times.len(), values: values.len() });
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(FilterError::NonMonotoneTimes { index: i + 1 });
    }
    if !(s.rel_tol > 0.0) || s.k_min > s.k_max {
        return Err(FilterError::InvalidConfig("spline needs rel_tol > 0 and k_min <= k_max".into()));
    }
    if times.len() < s.k_min + 2 {
        return Err(FilterError::InsufficientData { needed: s.k_min + 2, got: times.len() });
    }
    Ok(())
}

/// Fits for every knot count `k_min..=k_max`, each warm-started from the
/// previous one, so the SSE is nonincreasing along the path.
pub fn spline_path(times: &[f64], values: &[f64], s: &SplineSettings) -> Result<Vec<SplineModel>, FilterError> {
    validate(times, values, s)?;
    let problem = KnotProblem { times, y: values };
    let mut out: Vec<SplineModel> = Vec::new();
    for k in s.k_min..=s.k_max.min(times.len() - 2) {
        let m = fit_with_knots(&problem, k, out.last());
        out.push(m);
    }
    Ok(out)
}

/// Fits a piecewise-linear spline with between `k_min` and `k_max` interior
/// knots, adding knots until the relative SSE improvement drops below
/// `rel_tol`. Returns the lowest-SSE model (fewest knots on ties).
pub fn fit_spline1d(times: &[f64], values: &[f64], s: &SplineSettings) -> Result<SplineModel, FilterError> {
    validate(times, values, s)?;
    crate::instrument::filter_fit();
    let problem = KnotProblem { times, y: values };
    let value_scale: f64 = values.iter().map(|v| v * v).sum();
    let mut prev: Option<SplineModel> = None;
    let mut best: Option<SplineModel> = None;
    for k in s.k_min..=s.k_max.min(times.len() - 2) {
        let model = fit_with_knots(&problem, k, prev.as_ref());
        let stop = match &prev {
            Some(p) => !(p.fit_sse > 0.0) || (p.fit_sse - model.fit_sse) / p.fit_sse < s.rel_tol,
            None => false,
        };
        if best.as_ref().is_none_or(|b| improves(model.fit_sse, b.fit_sse, value_scale)) {
            best = Some(model.clone());
        }
        prev = Some(model);
        if stop {
            break;
        }
    }
    best.ok_or(FilterError::InsufficientData { needed: s.k_min + 2, got: times.len() })
}
