//! Box-constrained Levenberg-Marquardt with projected steps.

use nalgebra::{DMatrix, DVector};

/// A least-squares problem `min 0.5 |res(p)|^2`.
pub trait LeastSquares {
    fn n_residuals(&self) -> usize;

    fn residuals(&self, p: &[f64], out: &mut [f64]);

    /// `m x n` Jacobian of the residuals. Defaults to forward differences.
    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let m = self.n_residuals();
        let mut base = vec![0.0; m];
        let mut shifted = vec![0.0; m];
        self.residuals(p, &mut base);
        let mut q = p.to_vec();
        for j in 0..p.len() {
            let h = 1e-7 * p[j].abs().max(1e-3);
            q[j] = p[j] + h;
            self.residuals(&q, &mut shifted);
            q[j] = p[j];
            for i in 0..m {
                jac[(i, j)] = (shifted[i] - base[i]) / h;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when an accepted step lowers the SSE by less than this fraction.
    pub ftol: f64,
    /// Stop when the step is below this fraction of the parameter norm.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 200, ftol: 1e-10, xtol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    /// False when the residuals became non-finite.
    pub finite: bool,
}

fn sse(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn project(p: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in p.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimizes the SSE of `problem` over the box `[lo, hi]` starting from `p0`.
/// Only SSE-decreasing steps are accepted, so the result never has a larger
/// SSE than the (projected) start.
pub fn minimize<P: LeastSquares + ?Sized>(problem: &P, p0: &[f64], lo: &[f64], hi: &[f64], opts: &LmOptions) -> LmResult {
    let n = p0.len();
    let m = problem.n_residuals();
    let mut p = p0.to_vec();
    project(&mut p, lo, hi);
    let mut r = vec![0.0; m];
    problem.residuals(&p, &mut r);
    let mut f = sse(&r);
    if !f.is_finite() {
        return LmResult { params: p, sse: f, iterations: 0, finite: false };
    }
    if n == 0 || m == 0 {
        return LmResult { params: p, sse: f, iterations: 0, finite: true };
    }
    let mut jac = DMatrix::zeros(m, n);
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; m];
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut iterations = 0;
    'outer: while iterations < opts.max_iter {
        iterations += 1;
        problem.jacobian(&p, &mut jac);
        let rv = DVector::from_column_slice(&r);
        let mut grad = jac.tr_mul(&rv);
        let mut a = jac.tr_mul(&jac);
        // freeze parameters held at a bound by a gradient pushing outward
        let mut free = vec![true; n];
        for j in 0..n {
            let at_lo = p[j] <= lo[j] && grad[j] > 0.0;
            let at_hi = p[j] >= hi[j] && grad[j] < 0.0;
            if at_lo || at_hi {
                free[j] = false;
                grad[j] = 0.0;
            }
        }
        if grad.amax() <= 1e-300 {
            break;
        }
        let diag: Vec<f64> = (0..n).map(|j| a[(j, j)].max(1e-12 * a.diagonal().amax()).max(f64::MIN_POSITIVE)).collect();
        if lambda < 0.0 {
            lambda = 1e-3;
        }
        for j in 0..n {
            if !free[j] {
                for k in 0..n {
                    a[(j, k)] = 0.0;
                    a[(k, j)] = 0.0;
                }
            }
        }
        loop {
            let mut lhs = a.clone();
            for j in 0..n {
                lhs[(j, j)] = if free[j] { a[(j, j)] + lambda * diag[j] } else { 1.0 };
            }
            let step = match lhs.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= nu;
                    nu *= 2.0;
                    if lambda > 1e16 {
                        break 'outer;
                    }
                    continue;
                }
            };
            for j in 0..n {
                trial[j] = p[j] + step[j];
            }
            project(&mut trial, lo, hi);
            problem.residuals(&trial, &mut r_trial);
            let f_trial = sse(&r_trial);
            if f_trial.is_finite() && f_trial < f {
                let moved: f64 = trial.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let scale: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel_drop = (f - f_trial) / f;
                std::mem::swap(&mut p, &mut trial);
                std::mem::swap(&mut r, &mut r_trial);
                f = f_trial;
                lambda = (lambda / 3.0).max(1e-12);
                nu = 2.0;
                if rel_drop < opts.ftol || moved <= opts.xtol * (scale + opts.xtol) || f == 0.0 {
                    break 'outer;
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e16 {
                break 'outer;
            }
        }
    }
    LmResult { params: p, sse: f, iterations, finite: true }
}
