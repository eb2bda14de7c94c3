//! Sparse symmetric matrices, deflated conjugate gradient and a block inverse
//! iteration for the bottom of the spectrum of a positive semidefinite
//! operator with a known one-dimensional kernel.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let dim = rows.len();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// Stored `(column, value)` entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.vals[k]))
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.dim];
        self.matvec(x, &mut y);
        dot(x, &y)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] = self.vals[k];
            }
        }
        m
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Removes the component along the unit vector `u`.
pub fn project_out(v: &mut [f64], u: &[f64]) {
    let c = dot(v, u);
    axpy(-c, u, v);
}

/// Solves `A x = b` on the orthogonal complement of the unit vector `null`
/// (which must span the kernel of `A`). Returns the iteration count.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    null: Option<&[f64]>,
    rel_tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = a.dim;
    let mut rhs = b.to_vec();
    if let Some(u) = null {
        project_out(&mut rhs, u);
        project_out(x, u);
    }
    let bnorm = norm(&rhs);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut ax = vec![0.0; n];
    a.matvec(x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if let Some(u) = null {
        project_out(&mut r, u);
    }
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if rr.sqrt() <= rel_tol * bnorm {
            return Ok(it);
        }
        a.matvec(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        if let Some(u) = null {
            project_out(&mut r, u);
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    if rr.sqrt() <= 10.0 * rel_tol * bnorm {
        return Ok(max_iter);
    }
    Err(Error::NoConvergence(format!(
        "CG residual {:.3e} after {max_iter} iterations",
        rr.sqrt() / bnorm
    )))
}

#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Orthonormalizes the columns in place (two passes of modified
/// Gram–Schmidt) after removing `null`. Drops nothing; a collapsed column is
/// replaced by a deterministic fresh direction.
fn orthonormalize(vs: &mut [Vec<f64>], null: &[f64], rng: &mut ChaCha8Rng) {
    for i in 0..vs.len() {
        for _ in 0..2 {
            project_out(&mut vs[i], null);
            for j in 0..i {
                let (done, rest) = vs.split_at_mut(i);
                project_out(&mut rest[0], &done[j]);
            }
        }
        let nv = norm(&vs[i]);
        if nv < 1e-300 || !nv.is_finite() {
            vs[i] = (0..null.len()).map(|_| StandardNormal.sample(rng)).collect();
            project_out(&mut vs[i], null);
            for j in 0..i {
                let (done, rest) = vs.split_at_mut(i);
                project_out(&mut rest[0], &done[j]);
            }
        }
        let nv = norm(&vs[i]);
        vs[i].iter_mut().for_each(|v| *v /= nv);
    }
}

/// Smallest `nev` eigenpairs of the PSD matrix `a` restricted to the
/// complement of its unit null vector, by block inverse iteration with
/// Rayleigh–Ritz (`block >= nev`).
pub fn smallest_eigenpairs(
    a: &CsrMatrix,
    null: &[f64],
    nev: usize,
    block: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenPairs> {
    let n = a.dim;
    let block = block.max(nev).min(n.saturating_sub(1));
    if block == 0 {
        return Err(Error::InvalidInput("operator too small for an eigensolve".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalize(&mut xs, null, &mut rng);
    let mut prev = vec![f64::INFINITY; nev];
    let mut av = vec![0.0; n];
    for iter in 1..=500 {
        let mut ys = Vec::with_capacity(block);
        for x in &xs {
            let mut y = x.clone();
            conjugate_gradient(a, x, &mut y, Some(null), 1e-12, 20 * n.max(100))?;
            ys.push(y);
        }
        orthonormalize(&mut ys, null, &mut rng);
        let ays: Vec<Vec<f64>> = ys
            .iter()
            .map(|y| {
                let mut out = vec![0.0; n];
                a.matvec(y, &mut out);
                out
            })
            .collect();
        let t = DMatrix::from_fn(block, block, |i, j| 0.5 * (dot(&ys[i], &ays[j]) + dot(&ys[j], &ays[i])));
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let theta: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        xs = order
            .iter()
            .map(|&k| {
                let mut v = vec![0.0; n];
                for (j, y) in ys.iter().enumerate() {
                    axpy(eig.eigenvectors[(j, k)], y, &mut v);
                }
                v
            })
            .collect();
        let mut converged = true;
        for i in 0..nev {
            a.matvec(&xs[i], &mut av);
            let res: f64 = av
                .iter()
                .zip(&xs[i])
                .map(|(p, q)| (p - theta[i] * q).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = theta[i].abs().max(1e-12);
            if res > tol * scale.max(1.0) || (theta[i] - prev[i]).abs() > tol * scale {
                converged = false;
            }
        }
        prev.copy_from_slice(&theta[..nev]);
        if converged {
            return Ok(EigenPairs {
                values: theta[..nev].to_vec(),
                vectors: xs[..nev].to_vec(),
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence("block inverse iteration".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Path-graph Laplacian on `n` nodes; kernel is the constant vector.
    fn path_laplacian(n: usize) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = Vec::new();
                let mut d = 0.0;
                if i > 0 {
                    r.push((i - 1, -1.0));
                    d += 1.0;
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                    d += 1.0;
                }
                r.push((i, d));
                r
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }

    #[test]
    fn cg_solves_on_complement() {
        let a = path_laplacian(50);
        let null = vec![1.0 / (50f64).sqrt(); 50];
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; 50];
        conjugate_gradient(&a, &b, &mut x, Some(&null), 1e-13, 1000).unwrap();
        let mut ax = vec![0.0; 50];
        a.matvec(&x, &mut ax);
        let mut pb = b.clone();
        project_out(&mut pb, &null);
        for (p, q) in ax.iter().zip(&pb) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-10);
        }
    }

    #[test]
    fn path_spectrum_matches_closed_form() {
        let n = 40;
        let a = path_laplacian(n);
        let null = vec![1.0 / (n as f64).sqrt(); n];
        let eig = smallest_eigenpairs(&a, &null, 3, 5, 1e-10, 7).unwrap();
        for (k, v) in eig.values.iter().enumerate() {
            let exact = 2.0 * (1.0 - (std::f64::consts::PI * (k + 1) as f64 / n as f64).cos());
            assert_abs_diff_eq!(*v, exact, epsilon = 1e-9);
        }
        let dense = SymmetricEigen::new(a.to_dense());
        let mut ev: Vec<f64> = dense.eigenvalues.iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[1], eig.values[0], epsilon = 1e-9);
    }
}
