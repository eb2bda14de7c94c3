//! The conservative measure `σ_M` on `ℝⁿ`, its Gaussian base and the
//! mean-field convex example.
//!
//! `σ_M` has energy `H_M(x) = Σᵢ V(xᵢ) + V(M - Σᵢ xᵢ)`; the implicit
//! `(n+1)`-th coordinate `M - Σx` is called the *last* site below. Viewing a
//! point of `ℝⁿ` together with its last site gives the conditional measure
//! `μ_M` on the hyperplane `Σ = M` of `ℝ^{n+1}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::potential::{eval_site_potential, PerturbationSpec};

#[derive(Debug, Clone, Serialize)]
pub struct ConservativeModel {
    pub n: usize,
    pub total: f64,
    pub pert: PerturbationSpec,
}

impl ConservativeModel {
    pub fn new(n: usize, total: f64, pert: PerturbationSpec) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("n must be >= 1".into()));
        }
        if !total.is_finite() {
            return Err(Error::InvalidInput("total spin M must be finite".into()));
        }
        Ok(Self { n, total, pert })
    }

    /// Number of sites `n + 1` of the conditional measure.
    pub fn sites(&self) -> usize {
        self.n + 1
    }

    /// Common mean `M/(n+1)` of every coordinate.
    pub fn site_mean(&self) -> f64 {
        self.total / self.sites() as f64
    }

    /// Same potential, `n` free coordinates and total `M`.
    pub fn with(&self, n: usize, total: f64) -> Result<Self> {
        Self::new(n, total, self.pert.clone())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn last(&self, x: &[f64]) -> f64 {
        self.total - x.iter().sum::<f64>()
    }

    /// Appends the last site, giving a point of the hyperplane in `ℝ^{n+1}`.
    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.n + 1);
        y.extend_from_slice(x);
        y.push(self.last(x));
        y
    }

    #[inline]
    pub fn site_potential(&self, u: f64) -> f64 {
        0.5 * u * u + self.pert.f(u)
    }

    #[inline]
    pub fn site_force(&self, u: f64) -> f64 {
        u + self.pert.df(u)
    }

    #[inline]
    pub fn site_curvature(&self, u: f64) -> f64 {
        1.0 + self.pert.d2f(u)
    }

    /// `H_M(x)`.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.energy_unchecked(x))
    }

    #[inline]
    pub(crate) fn energy_unchecked(&self, x: &[f64]) -> f64 {
        let last = self.last(x);
        x.iter().map(|&u| self.site_potential(u)).sum::<f64>() + self.site_potential(last)
    }

    /// `∂ᵢH_M = V'(xᵢ) - V'(M - Σx)`.
    pub fn grad_energy(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut g = vec![0.0; self.n];
        self.grad_into(x, &mut g);
        Ok(g)
    }

    #[inline]
    pub(crate) fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let dl = self.site_force(self.last(x));
        for (o, &u) in out.iter_mut().zip(x) {
            *o = self.site_force(u) - dl;
        }
    }

    /// `Hessᵢⱼ = δᵢⱼ V''(xᵢ) + V''(M - Σx)`.
    pub fn hess_energy(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let c = self.site_curvature(self.last(x));
        let mut h = DMatrix::from_element(self.n, self.n, c);
        for (i, &u) in x.iter().enumerate() {
            h[(i, i)] += self.site_curvature(u);
        }
        Ok(h)
    }

    /// `B(x) = Σ F(xᵢ) + F(M - Σx)`, so that `dσ_M ∝ e^{-B} dγ_{n,M}`.
    pub fn log_density_vs_gaussian(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let last = self.last(x);
        Ok(x.iter().map(|&u| self.pert.f(u)).sum::<f64>() + self.pert.f(last))
    }

    /// `|x|²/2 + (M - Σx)²/2`, the energy with `F ≡ 0`.
    pub fn quadratic_part(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let last = self.last(x);
        Ok(0.5 * x.iter().map(|u| u * u).sum::<f64>() + 0.5 * last * last)
    }

    pub fn gaussian_base(&self) -> GaussianBase {
        GaussianBase {
            n: self.n,
            total: self.total,
        }
    }

    /// `(V, V', V'')` at a single site; thin wrapper for callers holding a model.
    pub fn site(&self, u: f64) -> (f64, f64, f64) {
        eval_site_potential(&self.pert, u)
    }
}

/// `γ_{n,M}`: mean `M/(n+1)·𝟙`, precision `I + 𝟏`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianBase {
    pub n: usize,
    pub total: f64,
}

impl GaussianBase {
    pub fn mean(&self) -> DVector<f64> {
        DVector::from_element(self.n, self.total / (self.n + 1) as f64)
    }

    pub fn precision(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n) + DMatrix::from_element(self.n, self.n, 1.0)
    }

    /// `I - 𝟏/(n+1)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n)
            - DMatrix::from_element(self.n, self.n, 1.0 / (self.n + 1) as f64)
    }

    pub fn var(&self) -> f64 {
        self.n as f64 / (self.n + 1) as f64
    }

    pub fn cov(&self) -> f64 {
        -1.0 / (self.n + 1) as f64
    }
}

/// Induced Hessian `JᵀHJ` of `H_M` from the Hessian of `H` on `ℝ^{n+1}`,
/// where `J h = (h, -Σh)`.
pub fn constrained_hessian(hess_h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = hess_h.nrows();
    if m < 2 || hess_h.ncols() != m {
        return Err(Error::InvalidInput("Hessian must be square of size >= 2".into()));
    }
    let n = m - 1;
    let mut j = DMatrix::zeros(m, n);
    for i in 0..n {
        j[(i, i)] = 1.0;
        j[(n, i)] = -1.0;
    }
    Ok(j.transpose() * hess_h * j)
}

/// Whether `Hess H ⪰ ρI` transfers to `Hess H_M ⪰ ρI`, decided by a dense
/// eigensolve of the induced Hessian.
pub fn strict_convexity_transfer_check(hess_h: &DMatrix<f64>, rho: f64) -> Result<bool> {
    let induced = constrained_hessian(hess_h)?;
    let eig = SymmetricEigen::new(induced);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(min >= rho - crate::tol::EXACT_EIGEN)
}

/// Even convex pair interaction of the mean-field example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PairPotential {
    /// `c·u²/2`
    Quadratic { curvature: f64 },
    /// `u²/2 + c·u⁴`
    QuadraticQuartic { quartic: f64 },
}

impl PairPotential {
    pub fn value(&self, u: f64) -> f64 {
        match *self {
            PairPotential::Quadratic { curvature } => 0.5 * curvature * u * u,
            PairPotential::QuadraticQuartic { quartic } => 0.5 * u * u + quartic * u.powi(4),
        }
    }

    pub fn second(&self, u: f64) -> f64 {
        match *self {
            PairPotential::Quadratic { curvature } => curvature,
            PairPotential::QuadraticQuartic { quartic } => 1.0 + 12.0 * quartic * u * u,
        }
    }

    /// `inf V''`.
    pub fn rho(&self) -> f64 {
        match *self {
            PairPotential::Quadratic { curvature } => curvature,
            PairPotential::QuadraticQuartic { quartic } => {
                if quartic >= 0.0 {
                    1.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// `H(x) = (2(n+1))⁻¹ Σᵢⱼ V_{ij}(xᵢ - xⱼ)` on `ℝ^{n+1}`.
#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldModel {
    pub n_plus_1: usize,
    pairs: Vec<PairPotential>,
}

impl MeanFieldModel {
    pub fn uniform(n_plus_1: usize, pot: PairPotential) -> Result<Self> {
        Self::with_pairs(n_plus_1, |_, _| pot)
    }

    /// `pot(i, j)` must be symmetric in `(i, j)`; only `i < j` is queried.
    pub fn with_pairs(n_plus_1: usize, pot: impl Fn(usize, usize) -> PairPotential) -> Result<Self> {
        if n_plus_1 < 2 {
            return Err(Error::InvalidInput("mean-field model needs >= 2 sites".into()));
        }
        let mut pairs = vec![PairPotential::Quadratic { curvature: 0.0 }; n_plus_1 * n_plus_1];
        for i in 0..n_plus_1 {
            for j in (i + 1)..n_plus_1 {
                let p = pot(i, j);
                pairs[i * n_plus_1 + j] = p;
                pairs[j * n_plus_1 + i] = p;
            }
        }
        Ok(Self { n_plus_1, pairs })
    }

    pub fn pair(&self, i: usize, j: usize) -> PairPotential {
        self.pairs[i * self.n_plus_1 + j]
    }

    pub fn rho(&self) -> f64 {
        let m = self.n_plus_1;
        (0..m)
            .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
            .map(|(i, j)| self.pair(i, j).rho())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let m = self.n_plus_1;
        let mut e = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    e += self.pair(i, j).value(x[i] - x[j]);
                }
            }
        }
        e / (2.0 * m as f64)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.n_plus_1;
        if x.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: x.len(),
            });
        }
        let mut h = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    let c = self.pair(i, j).second(x[i] - x[j]) / m as f64;
                    h[(i, j)] = -c;
                    h[(i, i)] += c;
                }
            }
        }
        Ok(h)
    }
}

/// Ascending spectrum of the mean-field Hessian at `x`.
pub fn meanfield_spectrum(mf: &MeanFieldModel, x: &[f64]) -> Result<Vec<f64>> {
    let h = mf.hessian(x)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(n: usize, m: f64, eps: f64) -> ConservativeModel {
        ConservativeModel::new(n, m, PerturbationSpec::sine(eps)).unwrap()
    }

    #[test]
    fn energy_examples() {
        let z = ConservativeModel::new(2, 0.0, PerturbationSpec::zero()).unwrap();
        assert_eq!(z.energy(&[0.0, 0.0]).unwrap(), 0.0);
        let z = ConservativeModel::new(2, 3.0, PerturbationSpec::zero()).unwrap();
        assert_abs_diff_eq!(z.energy(&[1.0, 1.0]).unwrap(), 1.5);
        assert_eq!(sine(1, 0.0, 1.0).energy(&[0.0]).unwrap(), 0.0);
        assert!(matches!(
            z.energy(&[1.0]),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn gradient_and_hessian_examples() {
        for n in 1..6 {
            let z = ConservativeModel::new(n, 2.5, PerturbationSpec::zero()).unwrap();
            let x = vec![z.site_mean(); n];
            for g in z.grad_energy(&x).unwrap() {
                assert_abs_diff_eq!(g, 0.0, epsilon = 1e-14);
            }
        }
        let z = ConservativeModel::new(2, 0.7, PerturbationSpec::zero()).unwrap();
        let h = z.hess_energy(&[0.3, -1.1]).unwrap();
        let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 3.0, epsilon = 1e-12);

        let g = sine(1, 0.0, 1.0).grad_energy(&[0.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.0);
    }

    #[test]
    fn log_density_examples() {
        let z = ConservativeModel::new(3, 1.0, PerturbationSpec::zero()).unwrap();
        assert_eq!(z.log_density_vs_gaussian(&[0.4, 2.0, -7.0]).unwrap(), 0.0);
        assert_eq!(sine(2, 0.0, 1.0).log_density_vs_gaussian(&[0.0, 0.0]).unwrap(), 0.0);
        let m = sine(4, 1.3, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let b = m.log_density_vs_gaussian(&x).unwrap();
            assert!(b.abs() <= 0.5 + 1e-12);
            assert_abs_diff_eq!(
                m.energy(&x).unwrap() - m.quadratic_part(&x).unwrap(),
                b,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn gaussian_base_algebra() {
        for n in 1..12 {
            let g = GaussianBase { n, total: 0.0 };
            let prod = g.precision() * g.covariance();
            assert!((prod - DMatrix::identity(n, n)).abs().max() < 1e-12);
            if n >= 2 {
                let c = g.covariance();
                assert_abs_diff_eq!(c[(0, 1)], g.cov(), epsilon = 1e-15);
                assert_abs_diff_eq!(c[(0, 0)], g.var(), epsilon = 1e-15);
                assert_abs_diff_eq!(g.var(), -(n as f64) * g.cov(), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, eps) in &[(1, 0.3), (2, 0.1), (5, 0.2), (9, 0.05)] {
            let m = sine(n, rng.random_range(-3.0..3.0), eps);
            for _ in 0..20 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let g = m.grad_energy(&x).unwrap();
                let hs = m.hess_energy(&x).unwrap();
                for i in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (m.energy(&xp).unwrap() - m.energy(&xm).unwrap()) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6);
                    let gp = m.grad_energy(&xp).unwrap();
                    let gm = m.grad_energy(&xm).unwrap();
                    for j in 0..n {
                        assert!(((gp[j] - gm[j]) / (2.0 * h) - hs[(i, j)]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_perturbation_bound() {
        let m = sine(4, 0.5, 0.2);
        let base = m.gaussian_base().precision();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // base^{-1/2} (Hess - base) base^{-1/2} has spectrum in [-‖F''‖∞, ‖F''‖∞].
        let inv_sqrt = {
            let e = SymmetricEigen::new(base.clone());
            let d = e.eigenvalues.map(|v| 1.0 / v.sqrt());
            &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
        };
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-6.0..6.0)).collect();
            let d = m.hess_energy(&x).unwrap() - &base;
            for ev in SymmetricEigen::new(&inv_sqrt * &d * &inv_sqrt).eigenvalues.iter() {
                assert!(ev.abs() <= m.pert.sup_d2f + 1e-12);
            }
            for ev in SymmetricEigen::new(d).eigenvalues.iter() {
                assert!(ev.abs() <= 5.0 * m.pert.sup_d2f + 1e-12);
            }
        }
    }

    #[test]
    fn convexity_transfer_examples() {
        assert!(strict_convexity_transfer_check(&DMatrix::identity(3, 3), 1.0).unwrap());
        assert!(strict_convexity_transfer_check(&(DMatrix::identity(4, 4) * 2.0), 2.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let rho = rng.random_range(0.1..2.0);
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let h = &a * a.transpose() + DMatrix::identity(4, 4) * rho;
            assert!(strict_convexity_transfer_check(&h, rho).unwrap());
        }
        // Not convex enough: the induced Hessian of 0.5·I is 0.5(I + 𝟏).
        assert!(!strict_convexity_transfer_check(&(DMatrix::identity(3, 3) * 0.5), 1.0).unwrap());
    }

    #[test]
    fn meanfield_examples() {
        let q = PairPotential::Quadratic { curvature: 1.0 };
        let mf = MeanFieldModel::uniform(3, q).unwrap();
        let ev = meanfield_spectrum(&mf, &[0.3, -2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[2], 1.0, epsilon = 1e-12);

        let mf = MeanFieldModel::uniform(5, q).unwrap();
        let ev = meanfield_spectrum(&mf, &[0.0; 5]).unwrap();
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-12);
        assert!(ev[1] >= 4.0 / 5.0);

        let quartic = PairPotential::QuadraticQuartic { quartic: 0.01 };
        let mf = MeanFieldModel::uniform(6, quartic).unwrap();
        let ev = meanfield_spectrum(&mf, &[0.0; 6]).unwrap();
        assert!(ev[1] >= 5.0 / 6.0 - 1e-8);
    }

    #[test]
    fn meanfield_hessian_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mf = MeanFieldModel::with_pairs(5, |i, j| PairPotential::QuadraticQuartic {
            quartic: 0.01 * (i + j) as f64,
        })
        .unwrap();
        let rho = mf.rho();
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h = mf.hessian(&x).unwrap();
            assert!((&h - h.transpose()).abs().max() < 1e-15);
            for i in 0..5 {
                assert!(h.row(i).sum().abs() < 1e-12);
            }
            let ev = meanfield_spectrum(&mf, &x).unwrap();
            assert!(ev[0].abs() < 1e-10);
            assert!(ev[1] >= 4.0 / 5.0 * rho - 1e-8);
            // The null vector is 𝟙.
            let one = DVector::from_element(5, 1.0);
            assert!((h * one).norm() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn energy_is_exchangeable(
            x in proptest::collection::vec(-4.0f64..4.0, 4),
            total in -3.0f64..3.0,
            k in 0usize..4,
        ) {
            let m = sine(4, total, 0.2);
            let e = m.energy(&x).unwrap();
            let mut r = x.clone();
            r.rotate_left(k);
            prop_assert!((m.energy(&r).unwrap() - e).abs() < 1e-11);
            // Swapping x_1 with the last site is also a symmetry of H_M.
            let mut s = x.clone();
            s[0] = m.last(&x);
            prop_assert!((m.energy(&s).unwrap() - e).abs() < 1e-10);
        }
    }
}
