//! Gaussian radial basis function surfaces fitted by bounded nonlinear least
//! squares with an incrementally growing number of terms.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{minimize, LeastSquares, LmOptions};
use super::{improves, FilterError};
use crate::linalg::least_squares;
use crate::points::{sq_dist, Points};

const MAX_RESTARTS: usize = 3;

/// Polynomial removed by ordinary least squares before the RBF fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    /// Mean only.
    #[default]
    None,
    Linear,
    Quadratic,
}

impl Trend {
    fn degree(self) -> u32 {
        match self {
            Trend::None => 0,
            Trend::Linear => 1,
            Trend::Quadratic => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RbfSettings {
    pub n_min: usize,
    pub n_max: usize,
    pub rel_tol: f64,
    pub trend: Trend,
    /// Degree of a polynomial fitted jointly with the RBF terms (constant
    /// excluded; the trend carries it).
    pub poly_degree: Option<u32>,
    /// Centers may leave the data bounding box by this fraction of its width
    /// on each side.
    pub center_margin: f64,
    /// Bound on each weight's magnitude, as a multiple of the largest
    /// detrended data magnitude.
    pub weight_bound: Option<f64>,
}

impl Default for RbfSettings {
    fn default() -> Self {
        Self { n_min: 1, n_max: 7, rel_tol: 0.01, trend: Trend::None, poly_degree: None, center_margin: 0.0, weight_bound: Some(3.0) }
    }
}

/// Exponent vectors of all monomials in `dim` variables with total degree in
/// `lo..=hi`, graded then lexicographic.
fn monomials(dim: usize, lo: u32, hi: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for deg in lo..=hi {
        let mut cur = vec![0u32; dim];
        fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if pos + 1 == cur.len() {
                cur[pos] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[pos] = e;
                rec(pos + 1, left - e, cur, out);
            }
        }
        if dim == 0 {
            continue;
        }
        rec(0, deg, &mut cur, &mut out);
    }
    out
}

/// A fitted surface `baseline(z) + sum_i w_i exp(-|x - r_i|^2 / s_i) + poly(z)`
/// where `z` is `x` mapped affinely onto the unit box of the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfModel {
    pub dim: usize,
    pub origin: Vec<f64>,
    pub half_width: Vec<f64>,
    pub trend: Trend,
    pub baseline: Vec<f64>,
    pub weights: Vec<f64>,
    pub centers: Points,
    pub scales: Vec<f64>,
    pub poly_degree: Option<u32>,
    pub poly: Vec<f64>,
    pub fit_sse: f64,
}

impl RbfModel {
    pub fn n_terms(&self) -> usize {
        self.weights.len()
    }

    fn z(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.origin).zip(&self.half_width).map(|((v, o), h)| (v - o) / h).collect()
    }

    pub fn eval_point(&self, x: &[f64]) -> f64 {
        let z = self.z(x);
        let base: f64 = monomials(self.dim, 0, self.trend.degree())
            .iter()
            .zip(&self.baseline)
            .map(|(e, c)| c * monomial(&z, e))
            .sum();
        let rbf: f64 = self
            .centers
            .rows()
            .zip(&self.weights)
            .zip(&self.scales)
            .map(|((r, w), s)| {
                let d2: f64 = r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                w * (-d2 / s).exp()
            })
            .sum();
        let poly: f64 = match self.poly_degree {
            Some(p) if p >= 1 => monomials(self.dim, 1, p).iter().zip(&self.poly).map(|(e, c)| c * monomial(&z, e)).sum(),
            _ => 0.0,
        };
        base + rbf + poly
    }
}

fn monomial(z: &[f64], e: &[u32]) -> f64 {
    z.iter().zip(e).map(|(v, &k)| v.powi(k as i32)).product()
}

struct Problem<'a> {
    coords: &'a Points,
    target: &'a [f64],
    n: usize,
    /// Polynomial features, one row per data point.
    poly: DMatrix<f64>,
}

impl Problem<'_> {
    fn m(&self) -> usize {
        self.coords.dim()
    }

    fn block(&self) -> usize {
        self.m() + 2
    }
}

impl LeastSquares for Problem<'_> {
    fn n_residuals(&self) -> usize {
        self.target.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let (m, b) = (self.m(), self.block());
        let np = self.poly.ncols();
        for (k, x) in self.coords.rows().enumerate() {
            let mut f = 0.0;
            for i in 0..self.n {
                let t = &p[i * b..(i + 1) * b];
                let d2: f64 = (0..m).map(|j| (x[j] - t[1 + j]) * (x[j] - t[1 + j])).sum();
                f += t[0] * (-d2 * (-t[m + 1]).exp()).exp();
            }
            for c in 0..np {
                f += p[self.n * b + c] * self.poly[(k, c)];
            }
            out[k] = f - self.target[k];
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let (m, b) = (self.m(), self.block());
        let np = self.poly.ncols();
        for (k, x) in self.coords.rows().enumerate() {
            for i in 0..self.n {
                let t = &p[i * b..(i + 1) * b];
                let inv_s = (-t[m + 1]).exp();
                let d2: f64 = (0..m).map(|j| (x[j] - t[1 + j]) * (x[j] - t[1 + j])).sum();
                let e = (-d2 * inv_s).exp();
                jac[(k, i * b)] = e;
                for j in 0..m {
                    jac[(k, i * b + 1 + j)] = t[0] * e * 2.0 * (x[j] - t[1 + j]) * inv_s;
                }
                jac[(k, i * b + m + 1)] = t[0] * e * d2 * inv_s;
            }
            for c in 0..np {
                jac[(k, self.n * b + c)] = self.poly[(k, c)];
            }
        }
    }
}

struct Geometry {
    lo: Vec<f64>,
    hi: Vec<f64>,
    diam: f64,
    /// Median distance from a data point to its nearest neighbour.
    spacing: f64,
}

/// Median nearest-neighbour distance over at most 256 strided data points.
fn median_spacing(coords: &Points) -> f64 {
    let n = coords.len();
    let stride = n.div_ceil(256).max(1);
    let mut d: Vec<f64> = (0..n)
        .step_by(stride)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(coords.row(i), coords.row(j)))
                .filter(|&v| v > 0.0)
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|v| v.is_finite())
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2].sqrt()
}

fn geometry(coords: &Points, margin: f64) -> Geometry {
    let b = coords.bounds();
    let diam = b.iter().map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt();
    let pad = |l: f64, h: f64| margin * if h > l { h - l } else { diam };
    let lo = b.iter().map(|&(l, h)| l - pad(l, h)).collect();
    let hi = b.iter().map(|&(l, h)| h + pad(l, h)).collect();
    Geometry { lo, hi, diam, spacing: median_spacing(coords) }
}

/// Draws a data point with probability proportional to `|v_k| * D_k^2`, where
/// `D_k` is the distance to the nearest existing center (1 when none).
fn seed_center(coords: &Points, v: &[f64], existing: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = coords
        .rows()
        .zip(v)
        .map(|(x, y)| {
            let d2 = existing
                .iter()
                .map(|c| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            y.abs() * if d2.is_finite() { d2 } else { 1.0 }
        })
        .collect();
    let total: f64 = w.iter().sum();
    let k = if total > 0.0 && total.is_finite() {
        let mut u = rng.random::<f64>() * total;
        let mut pick = w.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        pick
    } else {
        rng.random_range(0..coords.len())
    };
    coords.row(k).to_vec()
}

/// Re-solves the linear parameters (weights and polynomial) for fixed
/// centers and scales.
fn solve_linear(problem: &Problem, p: &mut [f64]) {
    let (m, b) = (problem.m(), problem.block());
    let npts = problem.target.len();
    let np = problem.poly.ncols();
    let cols = problem.n + np;
    let a = DMatrix::from_fn(npts, cols, |k, c| {
        if c < problem.n {
            let t = &p[c * b..(c + 1) * b];
            let x = problem.coords.row(k);
            let d2: f64 = (0..m).map(|j| (x[j] - t[1 + j]) * (x[j] - t[1 + j])).sum();
            (-d2 * (-t[m + 1]).exp()).exp()
        } else {
            problem.poly[(k, c - problem.n)]
        }
    });
    if let Some(sol) = least_squares(&a, &DVector::from_column_slice(problem.target)) {
        if sol.iter().all(|v| v.is_finite()) {
            for c in 0..problem.n {
                p[c * b] = sol[c];
            }
            for c in 0..np {
                p[problem.n * b + c] = sol[problem.n + c];
            }
        }
    }
}

/// Fits an RBF surface, growing the term count from `n_min` until the
/// relative SSE improvement drops below `rel_tol` or `n_max` is reached.
/// Returns the lowest-SSE model (fewest terms on ties).
pub fn fit_rbf(coords: &Points, values: &[f64], s: &RbfSettings, seed: u64) -> Result<RbfModel, FilterError> {
    if coords.len() != values.len() {
        return Err(FilterError::LengthMismatch { coords: coords.len(), values: values.len() });
    }
    if !(s.rel_tol > 0.0) || s.n_min > s.n_max || s.n_max == 0 {
        return Err(FilterError::InvalidConfig("rbf needs rel_tol > 0 and 1 <= n_min <= n_max".into()));
    }
    let n_min = s.n_min.max(1);
    let m = coords.dim();
    let npts = coords.len();
    let geo = geometry(coords, s.center_margin.max(0.0));
    if !(geo.diam > 0.0) {
        return Err(FilterError::InsufficientData { needed: 2, got: 1 });
    }
    let bounds = coords.bounds();
    let origin: Vec<f64> = bounds.iter().map(|(l, h)| 0.5 * (l + h)).collect();
    let half_width: Vec<f64> = bounds.iter().map(|(l, h)| if h > l { 0.5 * (h - l) } else { 1.0 }).collect();
    let z: Vec<Vec<f64>> = coords
        .rows()
        .map(|x| x.iter().zip(&origin).zip(&half_width).map(|((v, o), h)| (v - o) / h).collect())
        .collect();

    let base_terms = monomials(m, 0, s.trend.degree());
    let base_mat = DMatrix::from_fn(npts, base_terms.len(), |k, c| monomial(&z[k], &base_terms[c]));
    let baseline = least_squares(&base_mat, &DVector::from_column_slice(values))
        .ok_or(FilterError::InsufficientData { needed: base_terms.len(), got: npts })?;
    let fitted_base = &base_mat * &baseline;
    let target: Vec<f64> = values.iter().zip(fitted_base.iter()).map(|(v, b)| v - b).collect();

    let poly_terms = match s.poly_degree {
        Some(p) if p >= 1 => monomials(m, 1, p),
        _ => Vec::new(),
    };
    let poly = DMatrix::from_fn(npts, poly_terms.len(), |k, c| monomial(&z[k], &poly_terms[c]));
    let np = poly_terms.len();
    let params_for = |n: usize| n * (m + 2) + np;
    if npts < params_for(n_min) {
        return Err(FilterError::InsufficientData { needed: params_for(n_min), got: npts });
    }
    if npts < params_for(s.n_max) {
        warn!("{npts} data points for up to {} parameters; capping the term count", params_for(s.n_max));
    }
    let n_max = (n_min..=s.n_max).take_while(|&n| params_for(n) <= npts).last().unwrap_or(n_min);

    let scale_ln = (geo.diam * geo.diam).ln();
    // a term narrower than the data spacing is invisible to the data and
    // its weight is unidentifiable
    let s_lo = (1e-4f64.ln() + scale_ln).max(2.0 * geo.spacing.max(f64::MIN_POSITIVE).ln());
    let s_hi = (4f64.ln() + scale_ln).max(s_lo);
    let w_max = match s.weight_bound {
        Some(k) => k * target.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        None => f64::INFINITY,
    };
    let bounds_for = |n: usize| {
        let mut lo = Vec::with_capacity(params_for(n));
        let mut hi = Vec::with_capacity(params_for(n));
        for _ in 0..n {
            lo.push(-w_max);
            hi.push(w_max);
            lo.extend(&geo.lo);
            hi.extend(&geo.hi);
            lo.push(s_lo);
            hi.push(s_hi);
        }
        lo.extend(std::iter::repeat_n(f64::NEG_INFINITY, np));
        hi.extend(std::iter::repeat_n(f64::INFINITY, np));
        (lo, hi)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LmOptions { max_iter: 150, ftol: 1e-9, xtol: 1e-10 };
    let value_scale: f64 = values.iter().map(|v| v * v).sum();
    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for n in n_min..=n_max {
        let problem = Problem { coords, target: &target, n, poly: poly.clone() };
        let (lo, hi) = bounds_for(n);
        let init_sigma = ((geo.diam / n as f64).powi(2)).ln().clamp(s_lo, s_hi);
        let mut result = None;
        for attempt in 0..=MAX_RESTARTS {
            let mut p0 = vec![0.0; params_for(n)];
            let mut centers: Vec<Vec<f64>> = Vec::new();
            let mut first_new = 0;
            if let (Some((pp, _)), 0) = (&prev, attempt) {
                let b = m + 2;
                let kept = n - 1;
                p0[..kept * b].copy_from_slice(&pp[..kept * b]);
                p0[n * b..].copy_from_slice(&pp[kept * b..]);
                for i in 0..kept {
                    centers.push(pp[i * b + 1..i * b + 1 + m].to_vec());
                }
                first_new = kept;
            }
            let mut resid = vec![0.0; npts];
            if first_new > 0 {
                problem.residuals(&p0, &mut resid);
            } else {
                resid.copy_from_slice(&target);
            }
            for i in first_new..n {
                let c = seed_center(coords, &resid, &centers, &mut rng);
                let b = m + 2;
                p0[i * b + 1..i * b + 1 + m].copy_from_slice(&c);
                p0[i * b + m + 1] = init_sigma;
                centers.push(c);
            }
            solve_linear(&problem, &mut p0);
            let r = minimize(&problem, &p0, &lo, &hi, &opts);
            if r.finite && r.sse.is_finite() {
                result = Some(r);
                break;
            }
            warn!("rbf fit with {n} terms diverged (attempt {})", attempt + 1);
        }
        let r = result.ok_or(FilterError::SolverDivergence { restarts: MAX_RESTARTS })?;
        let sse = r.sse;
        let stop = match &prev {
            Some((_, prev_sse)) => !(*prev_sse > 0.0) || (prev_sse - sse) / prev_sse < s.rel_tol,
            None => false,
        };
        if best.as_ref().is_none_or(|(_, _, b)| improves(sse, *b, value_scale)) {
            best = Some((n, r.params.clone(), sse));
        }
        prev = Some((r.params, sse));
        if stop {
            break;
        }
    }
    let (n, p, sse) = best.expect("at least one term count tried");
    let b = m + 2;
    Ok(RbfModel {
        dim: m,
        origin,
        half_width,
        trend: s.trend,
        baseline: baseline.iter().cloned().collect(),
        weights: (0..n).map(|i| p[i * b]).collect(),
        centers: Points::new(m, (0..n).flat_map(|i| p[i * b + 1..i * b + 1 + m].to_vec()).collect()),
        scales: (0..n).map(|i| p[i * b + m + 1].exp()).collect(),
        poly_degree: s.poly_degree,
        poly: p[n * b..].to_vec(),
        fit_sse: sse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(k: usize, lo: f64, hi: f64) -> Points {
        let axis: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
        Points::tensor_grid(&[axis.clone(), axis])
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 0, 2).len(), 6);
        assert_eq!(monomials(2, 1, 2).len(), 5);
        assert_eq!(monomials(3, 0, 1).len(), 4);
        assert_eq!(monomials(1, 0, 0), vec![vec![0]]);
    }

    #[test]
    fn recovers_single_bump_plus_constant() {
        let c = grid(12, 0.0, 5.0);
        let v: Vec<f64> = c.rows().map(|x| 0.7 + 0.3 * (-((x[0] - 2.0).powi(2) + (x[1] - 3.1).powi(2)) / 0.8).exp()).collect();
        let s = RbfSettings { n_min: 1, n_max: 3, rel_tol: 0.01, ..Default::default() };
        let m = fit_rbf(&c, &v, &s, 1).unwrap();
        let total: f64 = v.iter().map(|x| x * x).sum();
        assert!(m.fit_sse / total < 1e-6, "{}", m.fit_sse / total);
        assert!((1..=3).contains(&m.n_terms()));
        for (x, want) in c.rows().zip(&v) {
            assert!((m.eval_point(x) - want).abs() <= 1e-6 * want.abs().max(1.0) + 1e-3);
        }
    }

    #[test]
    fn brute_force_formula_matches() {
        let c = grid(9, -1.0, 1.0);
        let v: Vec<f64> = c.rows().map(|x| (2.0 * x[0]).sin() * x[1] + 0.1 * x[0]).collect();
        let s = RbfSettings { n_min: 2, n_max: 4, rel_tol: 1e-3, trend: Trend::Linear, poly_degree: Some(2), ..Default::default() };
        let m = fit_rbf(&c, &v, &s, 3).unwrap();
        let x = [0.37, -0.52];
        let z = [(x[0] - m.origin[0]) / m.half_width[0], (x[1] - m.origin[1]) / m.half_width[1]];
        let mut want = m.baseline[0] + m.baseline[1] * z[0] + m.baseline[2] * z[1];
        for i in 0..m.n_terms() {
            let r = m.centers.row(i);
            want += m.weights[i] * (-((x[0] - r[0]).powi(2) + (x[1] - r[1]).powi(2)) / m.scales[i]).exp();
        }
        let feats = [z[0] * z[0], z[0] * z[1], z[1] * z[1], z[0], z[1]];
        let ordered = monomials(2, 1, 2);
        for (e, c) in ordered.iter().zip(&m.poly) {
            let f = z[0].powi(e[0] as i32) * z[1].powi(e[1] as i32);
            assert!(feats.iter().any(|v| (v - f).abs() < 1e-15));
            want += c * f;
        }
        assert!((m.eval_point(&x) - want).abs() < 1e-12);
    }

    #[test]
    fn beats_mean_only_model() {
        let c = grid(9, 0.0, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = c.rows().map(|x| (x[0] * x[1]).cos() + rng.random_range(-0.2..0.2)).collect();
        let m = fit_rbf(&c, &v, &RbfSettings::default(), 4).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sse_mean: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
        assert!(m.fit_sse <= sse_mean);
        let direct: f64 = c.rows().zip(&v).map(|(x, y)| (m.eval_point(x) - y).powi(2)).sum();
        assert!((direct - m.fit_sse).abs() <= 1e-9 * sse_mean);
    }

    #[test]
    fn far_field_returns_mean() {
        let c = grid(9, 0.0, 5.0);
        let v: Vec<f64> = c.rows().map(|x| 2.0 + (-((x[0] - 2.5).powi(2) + (x[1] - 2.5).powi(2))).exp()).collect();
        let m = fit_rbf(&c, &v, &RbfSettings::default(), 5).unwrap();
        assert!((m.eval_point(&[1e4, -1e4]) - m.baseline[0]).abs() < 1e-12);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((m.baseline[0] - mean).abs() < 1e-6);
    }

    #[test]
    fn deterministic_for_seed() {
        let c = grid(9, 0.0, 5.0);
        let v: Vec<f64> = c.rows().map(|x| (x[0] - x[1]).sin()).collect();
        let a = fit_rbf(&c, &v, &RbfSettings::default(), 7).unwrap();
        let b = fit_rbf(&c, &v, &RbfSettings::default(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_too_few_points() {
        let c = Points::from_rows(&[[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        assert!(matches!(
            fit_rbf(&c, &[1.0, 2.0, 3.0], &RbfSettings::default(), 0),
            Err(FilterError::InsufficientData { .. })
        ));
    }
}
