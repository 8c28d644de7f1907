//! Small dense linear-algebra helpers: Lanczos for the leading eigenpairs of a
//! symmetric operator and ordinary least squares.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Leading eigenpairs of a symmetric matrix, largest first.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Unit-norm eigenvectors, one per value.
    pub vectors: Vec<Vec<f64>>,
}

/// Dense symmetric eigensolver, truncated to the `q` largest eigenvalues.
pub fn dense_top_eigen(a: &DMatrix<f64>, q: usize) -> EigenPairs {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().take(q).map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order.iter().take(q).map(|&i| eig.eigenvectors.column(i).iter().cloned().collect()).collect();
    EigenPairs { values, vectors }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for v in basis {
            let c = dot(w, v);
            axpy(-c, v, w);
        }
    }
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..5 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, basis);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            return Some(v);
        }
    }
    None
}

/// Leading `q` eigenpairs of the symmetric operator `matvec` on R^n by Lanczos
/// with full reorthogonalization. The Krylov space grows until every wanted
/// Ritz pair has residual below `rel_tol * |largest Ritz value|`.
pub fn lanczos_top_eigen<F>(n: usize, q: usize, rel_tol: f64, seed: u64, matvec: F) -> EigenPairs
where
    F: Fn(&[f64], &mut [f64]),
{
    assert!(q >= 1 && q <= n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut v = random_unit(n, &mut rng, &[]).expect("nonzero start vector");
    let mut w = vec![0.0; n];
    let mut next_check = (2 * q + 20).min(n);
    loop {
        matvec(&v, &mut w);
        let a = dot(&w, &v);
        axpy(-a, &v, &mut w);
        if let (Some(prev), Some(&b)) = (basis.last(), betas.last()) {
            axpy(-b, prev, &mut w);
        }
        basis.push(v.clone());
        alphas.push(a);
        orthogonalize(&mut w, &basis);
        let b = dot(&w, &w).sqrt();
        let k = basis.len();
        let scale = alphas.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(f64::MIN_POSITIVE);
        let exhausted = b <= 1e-13 * scale;
        if k == next_check || k == n || exhausted {
            let t = DMatrix::from_fn(k, k, |i, j| {
                if i == j {
                    alphas[i]
                } else if i + 1 == j {
                    betas[i]
                } else if j + 1 == i {
                    betas[j]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
            let top = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
            let wanted = q.min(k);
            let converged = wanted == q
                && order[..q].iter().all(|&i| (b * eig.eigenvectors[(k - 1, i)]).abs() <= rel_tol * top);
            if converged || k == n {
                return ritz(&basis, &eig, &order[..q], n);
            }
            next_check = (k + 10).min(n);
        }
        if exhausted {
            // invariant subspace found; continue from a fresh orthogonal direction
            match random_unit(n, &mut rng, &basis) {
                Some(fresh) => {
                    betas.push(0.0);
                    v = fresh;
                    continue;
                }
                None => {
                    return dense_fallback(n, q, &matvec);
                }
            }
        }
        betas.push(b);
        v = w.iter().map(|x| x / b).collect();
    }
}

fn ritz(basis: &[Vec<f64>], eig: &SymmetricEigen<f64, nalgebra::Dyn>, idx: &[usize], n: usize) -> EigenPairs {
    let mut values = Vec::with_capacity(idx.len());
    let mut vectors = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut y = vec![0.0; n];
        for (j, v) in basis.iter().enumerate() {
            axpy(eig.eigenvectors[(j, i)], v, &mut y);
        }
        let norm = dot(&y, &y).sqrt();
        y.iter_mut().for_each(|x| *x /= norm);
        values.push(eig.eigenvalues[i]);
        vectors.push(y);
    }
    EigenPairs { values, vectors }
}

fn dense_fallback<F: Fn(&[f64], &mut [f64])>(n: usize, q: usize, matvec: &F) -> EigenPairs {
    let mut a = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        matvec(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            a[(i, j)] = col[i];
        }
    }
    dense_top_eigen(&a, q)
}

/// Least-squares solution of `a x = b` via SVD; `None` when the solve fails.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.solve(b, eps).ok()
}
