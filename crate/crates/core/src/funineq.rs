//! Poincaré and log-Sobolev constants.
//!
//! For `n ≤ 3` the generator `Δ - ∇H·∇` is discretized on a cell-centred
//! tensor grid in Dirichlet-form variables: the quadratic form
//! `Σ_{edges} √(πᵢπⱼ)(fᵢ - fⱼ)²/h²` against the grid weights `π`. In the
//! symmetrized unknowns `g = √π f` this is the matrix
//!
//! ```text
//! A = h⁻² [diag(Σ_{j~i} e^{-(Hⱼ-Hᵢ)/2}) - adjacency]
//! ```
//!
//! whose kernel is spanned by `√π`. Its second eigenvalue is the discrete
//! spectral gap. Sample-based lower bounds, the one-spin curvature and a
//! one-dimensional log-Sobolev bracket cover larger `n`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConservativeModel;
use crate::observable::Observable;
use crate::quadrature::{GaussLegendre, SigmaQuadrature, DEFAULT_HALF_WIDTH};
use crate::sampler::{self, derive_seed, ChainConfig, SampleBatch};
use crate::sparse::{self, conjugate_gradient, CsrMatrix};
use crate::stats::{self, Estimate};

/// Relative shift of `λ₂` between the two resolutions beyond which the grid
/// is declared too coarse.
pub const MAX_RESOLUTION_SHIFT: f64 = 0.05;
const EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nodes: usize,
    /// Half-width of the window in units of the marginal standard deviation.
    pub half_width_sd: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nodes: 64,
            half_width_sd: 5.0,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.nodes < 8 || self.nodes % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "grid needs an even node count >= 8, got {}",
                self.nodes
            )));
        }
        if !(self.half_width_sd > 0.0) {
            return Err(Error::InvalidInput("grid half-width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GridEigensolve,
    BakryEmery,
    VariationalSamples,
    OneDCriterion,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub poincare_estimate: f64,
    pub lsi_estimate: Option<f64>,
    /// Upper bound on the log-Sobolev constant, when one is available.
    pub lsi_upper: Option<f64>,
    pub method: Method,
    /// Nodes per axis, or sample count.
    pub resolution: usize,
    pub error_estimate: f64,
}

/// The discretized generator on one grid.
#[derive(Debug, Clone)]
pub struct GridOperator {
    pub n: usize,
    pub nodes: usize,
    pub h: f64,
    pub axis: Vec<f64>,
    /// Normalized grid weights `π`.
    pub pi: Vec<f64>,
    /// `√π`, the unit null vector of `a`.
    pub sqrt_pi: Vec<f64>,
    pub a: CsrMatrix,
}

impl GridOperator {
    pub fn new(m: &ConservativeModel, g: &GridSpec) -> Result<Self> {
        g.validate()?;
        let n = m.n;
        if n > 3 {
            return Err(Error::InvalidInput(format!(
                "grid discretization supports n <= 3, got {n}"
            )));
        }
        let nn = n as f64;
        let sd = (nn / (nn + 1.0)).sqrt();
        let half = g.half_width_sd * sd;
        let h = 2.0 * half / g.nodes as f64;
        let c = m.site_mean();
        let axis: Vec<f64> = (0..g.nodes)
            .map(|k| c - half + (k as f64 + 0.5) * h)
            .collect();
        let len = g.nodes.pow(n as u32);
        let mut x = vec![0.0; n];
        let energy: Vec<f64> = (0..len)
            .map(|idx| {
                Self::point_of(&axis, n, idx, &mut x);
                m.energy_unchecked(&x)
            })
            .collect();
        let emin = energy.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut pi: Vec<f64> = energy.iter().map(|e| (-(e - emin)).exp()).collect();
        let z: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= z);
        let sqrt_pi: Vec<f64> = pi.iter().map(|p| p.sqrt()).collect();
        let inv_h2 = 1.0 / (h * h);
        let strides: Vec<usize> = (0..n).map(|d| g.nodes.pow((n - 1 - d) as u32)).collect();
        let rows = (0..len)
            .map(|i| {
                let mut row = Vec::with_capacity(2 * n + 1);
                let mut diag = 0.0;
                for &s in &strides {
                    let k = (i / s) % g.nodes;
                    let mut nbr = |j: usize| {
                        diag += (-(energy[j] - energy[i]) / 2.0).exp();
                        row.push((j, -inv_h2));
                    };
                    if k > 0 {
                        nbr(i - s);
                    }
                    if k + 1 < g.nodes {
                        nbr(i + s);
                    }
                }
                row.push((i, diag * inv_h2));
                row
            })
            .collect();
        Ok(Self {
            n,
            nodes: g.nodes,
            h,
            axis,
            pi,
            sqrt_pi,
            a: CsrMatrix::from_rows(rows),
        })
    }

    fn point_of(axis: &[f64], n: usize, idx: usize, out: &mut [f64]) {
        let q = axis.len();
        let mut r = idx;
        for d in (0..n).rev() {
            out[d] = axis[r % q];
            r /= q;
        }
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn point(&self, idx: usize, out: &mut [f64]) {
        Self::point_of(&self.axis, self.n, idx, out);
    }

    pub fn tabulate(&self, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        (0..self.len())
            .map(|i| {
                self.point(i, &mut x);
                f(&x)
            })
            .collect()
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.pi.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    pub fn variance(&self, f: &[f64]) -> f64 {
        let m = self.expect(f);
        self.pi.iter().zip(f).map(|(p, v)| p * (v - m) * (v - m)).sum()
    }

    /// `Ent_π(f²)`.
    pub fn entropy_sq(&self, f: &[f64]) -> f64 {
        let z: f64 = self.pi.iter().zip(f).map(|(p, v)| p * v * v).sum();
        let s: f64 = self
            .pi
            .iter()
            .zip(f)
            .map(|(p, v)| {
                let w = v * v;
                if w > 0.0 {
                    p * w * w.ln()
                } else {
                    0.0
                }
            })
            .sum();
        s - z * z.ln()
    }

    /// Discrete Dirichlet form `⟨|∇f|²⟩ = Σ_{edges} √(πᵢπⱼ)(fᵢ - fⱼ)²/h²`.
    pub fn dirichlet(&self, f: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in 0..self.len() {
            for (j, v) in self.a.row(i) {
                if j > i {
                    e -= v * self.sqrt_pi[i] * self.sqrt_pi[j] * (f[i] - f[j]).powi(2);
                }
            }
        }
        e
    }

    /// Discrete generator `(𝐋f)ᵢ = h⁻² Σ_{j~i} √(πⱼ/πᵢ)(fⱼ - fᵢ)`.
    pub fn generator(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                if self.sqrt_pi[i] == 0.0 {
                    return 0.0;
                }
                self.a
                    .row(i)
                    .filter(|&(j, _)| j != i)
                    .map(|(j, v)| -v * self.sqrt_pi[j] / self.sqrt_pi[i] * (f[j] - f[i]))
                    .sum()
            })
            .collect()
    }

    /// Lowest nonzero eigenpairs; eigenvectors are returned in `f` variables
    /// and normalized in `L²(π)`.
    pub fn eigen(&self, nev: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let e = sparse::smallest_eigenpairs(&self.a, &self.sqrt_pi, nev, nev + 2, EIGEN_TOL, 1)?;
        let vecs = e
            .vectors
            .into_iter()
            .map(|v| {
                v.iter()
                    .zip(&self.sqrt_pi)
                    .map(|(g, s)| if *s > 1e-300 { g / s } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok((e.values, vecs))
    }

    /// Minimum over the grid of the smallest Hessian eigenvalue of `H_M`.
    pub fn min_curvature(&self, m: &ConservativeModel) -> Result<f64> {
        let mut x = vec![0.0; self.n];
        let mut lo = f64::INFINITY;
        for i in 0..self.len() {
            self.point(i, &mut x);
            let e = SymmetricEigen::new(m.hess_energy(&x)?);
            lo = lo.min(e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        Ok(lo)
    }
}

/// `P = 1/λ₂` on the grid with a Richardson error from the half resolution.
pub fn generator_gap(m: &ConservativeModel, g: &GridSpec) -> Result<SpectralReport> {
    if g.nodes < 16 {
        return Err(Error::InvalidInput(format!(
            "the Richardson comparison needs at least 16 nodes per axis, got {}",
            g.nodes
        )));
    }
    let fine = GridOperator::new(m, g)?;
    let coarse = GridOperator::new(
        m,
        &GridSpec {
            nodes: g.nodes / 2,
            ..*g
        },
    )?;
    let lf = fine.eigen(1)?.0[0];
    let lc = coarse.eigen(1)?.0[0];
    let shift = (lf - lc).abs() / lf;
    if shift > MAX_RESOLUTION_SHIFT {
        return Err(Error::Resolution(format!(
            "spectral gap moved by {:.1}% between {} and {} nodes per axis",
            100.0 * shift,
            g.nodes / 2,
            g.nodes
        )));
    }
    // Second-order scheme: λ ≈ λ_f + (λ_f - λ_c)/3.
    let extrapolated = lf + (lf - lc) / 3.0;
    let p = 1.0 / lf;
    Ok(SpectralReport {
        poincare_estimate: p,
        lsi_estimate: None,
        lsi_upper: None,
        method: Method::GridEigensolve,
        resolution: g.nodes,
        error_estimate: (p - 1.0 / extrapolated).abs() + EIGEN_TOL * p,
    })
}

/// `P ≤ 1/ρ`, `L ≤ 2/ρ` with `ρ` the least Hessian eigenvalue over the grid.
pub fn bakry_emery(m: &ConservativeModel, g: &GridSpec) -> Result<SpectralReport> {
    let op = GridOperator::new(m, g)?;
    let rho = op.min_curvature(m)?;
    if !(rho > 0.0) {
        return Err(Error::Domain(format!(
            "Hessian is not positive on the grid (min eigenvalue {rho:.3e})"
        )));
    }
    Ok(SpectralReport {
        poincare_estimate: 1.0 / rho,
        lsi_estimate: Some(2.0 / rho),
        lsi_upper: Some(2.0 / rho),
        method: Method::BakryEmery,
        resolution: g.nodes,
        error_estimate: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsiOptions {
    pub random_starts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for LsiOptions {
    fn default() -> Self {
        Self {
            random_starts: 4,
            max_iter: 200,
            seed: 0,
        }
    }
}

/// Entropy Rayleigh quotient `Ent(f²)/E(f)` in the symmetrized unknowns.
struct LsiQuotient<'a> {
    op: &'a GridOperator,
}

impl LsiQuotient<'_> {
    fn parts(&self, g: &[f64]) -> (f64, f64) {
        let z: f64 = g.iter().map(|v| v * v).sum();
        let ent: f64 = g
            .iter()
            .zip(&self.op.pi)
            .map(|(v, p)| {
                let w = v * v;
                if w > 0.0 && *p > 0.0 {
                    w * (w / p).ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            - z * z.ln();
        (ent, self.op.a.quadratic_form(g))
    }

    fn value(&self, g: &[f64]) -> f64 {
        let (e, d) = self.parts(g);
        if d > 0.0 {
            e / d
        } else {
            f64::NEG_INFINITY
        }
    }

    fn gradient(&self, g: &[f64], out: &mut [f64]) -> f64 {
        let (ent, dir) = self.parts(g);
        let q = ent / dir;
        let z: f64 = g.iter().map(|v| v * v).sum();
        let mut ag = vec![0.0; g.len()];
        self.op.a.matvec(g, &mut ag);
        for (i, o) in out.iter_mut().enumerate() {
            let w = g[i] * g[i];
            let dent = if w > 0.0 && self.op.pi[i] > 0.0 {
                2.0 * g[i] * (w / (self.op.pi[i] * z)).ln()
            } else {
                0.0
            };
            *o = (dent - q * 2.0 * ag[i]) / dir;
        }
        q
    }
}

/// Maximizes the quotient from `g0` by Sobolev-preconditioned ascent.
/// Returns the best value and whether the stopping rule was met.
fn lsi_ascent(op: &GridOperator, mut g: Vec<f64>, shift: f64, max_iter: usize) -> Result<(f64, bool)> {
    let q = LsiQuotient { op };
    let nrm = sparse::norm(&g);
    g.iter_mut().for_each(|v| *v /= nrm);
    let shifted = {
        let len = op.len();
        let rows = (0..len)
            .map(|i| {
                let mut r = Vec::new();
                for (j, v) in op.a.row(i) {
                    r.push((j, if j == i { v + shift } else { v }));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(rows)
    };
    let mut grad = vec![0.0; g.len()];
    let mut history = Vec::with_capacity(max_iter + 1);
    let mut best = q.value(&g);
    history.push(best);
    let mut t = 1.0;
    let mut trial = vec![0.0; g.len()];
    for it in 0..max_iter {
        q.gradient(&g, &mut grad);
        let mut dir = vec![0.0; g.len()];
        conjugate_gradient(&shifted, &grad, &mut dir, None, 1e-6, 2_000).or_else(|e| match e {
            Error::NoConvergence(_) => Ok(0),
            other => Err(other),
        })?;
        t *= 2.0;
        let mut improved = false;
        while t > 1e-14 {
            for k in 0..g.len() {
                trial[k] = g[k] + t * dir[k];
            }
            let v = q.value(&trial);
            if v > best {
                best = v;
                std::mem::swap(&mut g, &mut trial);
                let nrm = sparse::norm(&g);
                g.iter_mut().for_each(|x| *x /= nrm);
                improved = true;
                break;
            }
            t *= 0.5;
        }
        history.push(best);
        if !improved {
            return Ok((best, true));
        }
        if it >= 100 {
            let old = history[history.len() - 101];
            if (best - old) <= 1e-8 * best.abs() {
                return Ok((best, true));
            }
        }
    }
    Ok((best, false))
}

/// Lower bound on `L` by maximizing `Ent(f²)/⟨|∇f|²⟩` over grid functions;
/// upper bound by Bakry–Émery when the Hessian is positive on the grid.
pub fn lsi_constant_grid(m: &ConservativeModel, g: &GridSpec) -> Result<SpectralReport> {
    lsi_constant_grid_with(m, g, &LsiOptions::default())
}

pub fn lsi_constant_grid_with(
    m: &ConservativeModel,
    g: &GridSpec,
    opts: &LsiOptions,
) -> Result<SpectralReport> {
    if m.n > 2 {
        return Err(Error::InvalidInput(format!(
            "log-Sobolev grid ascent supports n <= 2, got {}",
            m.n
        )));
    }
    let gap = generator_gap(m, g)?;
    let op = GridOperator::new(m, g)?;
    let (vals, vecs) = op.eigen(3)?;
    let lambda2 = vals[0];
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for psi in &vecs {
        for t in [0.05, 0.3] {
            starts.push(psi.iter().map(|v| 1.0 + t * v).collect());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coef = Normal::new(0.0, 0.3).expect("valid normal");
    for _ in 0..opts.random_starts {
        let a: Vec<f64> = (0..vecs.len()).map(|_| coef.sample(&mut rng)).collect();
        starts.push(
            (0..op.len())
                .map(|i| vecs.iter().zip(&a).map(|(v, c)| c * v[i]).sum::<f64>().exp())
                .collect(),
        );
    }
    let results: Vec<(f64, bool)> = starts
        .into_par_iter()
        .map(|f| {
            let g0: Vec<f64> = f.iter().zip(&op.sqrt_pi).map(|(v, s)| v * s).collect();
            lsi_ascent(&op, g0, lambda2, opts.max_iter)
        })
        .collect::<Result<_>>()?;
    let best = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let upper = match op.min_curvature(m)? {
        rho if rho > 0.0 => Some(2.0 / rho),
        _ => None,
    };
    Ok(SpectralReport {
        poincare_estimate: gap.poincare_estimate,
        lsi_estimate: Some(best),
        lsi_upper: upper,
        method: Method::GridEigensolve,
        resolution: g.nodes,
        // The ascent quotient shares the grid's discretization error, which
        // scales like the Poincaré one.
        error_estimate: 2.0 * gap.error_estimate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationalEntry {
    pub observable: String,
    pub ratio: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationalReport {
    /// `max_f Var(f)/⟨|∇f|²⟩` over the dictionary.
    pub bound: Estimate,
    pub best: String,
    pub entries: Vec<VariationalEntry>,
    pub skipped: Vec<String>,
    pub samples: usize,
}

impl VariationalReport {
    pub fn to_spectral(&self) -> SpectralReport {
        SpectralReport {
            poincare_estimate: self.bound.value,
            lsi_estimate: None,
            lsi_upper: None,
            method: Method::VariationalSamples,
            resolution: self.samples,
            error_estimate: self.bound.err,
        }
    }
}

/// Lower bound `P ≥ Var(f)/⟨|∇f|²⟩` maximized over a dictionary, from a `σ_M`
/// batch. Constant entries and entries with vanishing energy are skipped.
pub fn variational_gap_lower_bound(
    m: &ConservativeModel,
    batch: &SampleBatch,
    dictionary: &[Observable],
) -> Result<VariationalReport> {
    if batch.dim != m.n {
        return Err(Error::Dimension {
            expected: m.n,
            got: batch.dim,
        });
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for f in dictionary {
        f.validate(m.n)?;
        if f.is_constant() {
            skipped.push(f.name());
            continue;
        }
        let vals = batch.series(|x| f.eval(m, x));
        let energy = batch.series(|x| f.grad_sq(m, x));
        let mean_energy = stats::mean(&energy);
        if !(mean_energy > 1e-12) {
            skipped.push(f.name());
            continue;
        }
        let mu = stats::mean(&vals);
        let sq: Vec<f64> = vals.iter().map(|v| (v - mu) * (v - mu)).collect();
        entries.push(VariationalEntry {
            observable: f.name(),
            ratio: stats::estimate_ratio(&sq, &energy),
        });
    }
    let best = entries
        .iter()
        .max_by(|a, b| a.ratio.value.total_cmp(&b.ratio.value))
        .ok_or_else(|| Error::InvalidInput("dictionary has no usable entry".into()))?;
    Ok(VariationalReport {
        bound: best.ratio,
        best: best.observable.clone(),
        entries: entries.clone(),
        skipped,
        samples: batch.samples(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualRow {
    pub observable: String,
    /// `P⟨(𝐋f)²⟩`.
    pub lhs: f64,
    /// `⟨|∇f|²⟩`.
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualReport {
    pub poincare: f64,
    pub rows: Vec<DualRow>,
    pub all_hold: bool,
}

/// Checks `P⟨(𝐋f)²⟩ ≥ ⟨|∇f|²⟩` on the grid for every dictionary entry, with
/// `P` from [`generator_gap`].
pub fn dual_characterization_check(
    m: &ConservativeModel,
    g: &GridSpec,
    dictionary: &[Observable],
) -> Result<DualReport> {
    if m.n > 2 {
        return Err(Error::InvalidInput(format!(
            "dual check supports n <= 2, got {}",
            m.n
        )));
    }
    let p = generator_gap(m, g)?.poincare_estimate;
    let op = GridOperator::new(m, g)?;
    let rows: Vec<DualRow> = dictionary
        .iter()
        .map(|f| {
            f.validate(m.n)?;
            let vals = op.tabulate(|x| f.eval(m, x));
            let lf = op.generator(&vals);
            let lhs = p * op.expect(&lf.iter().map(|v| v * v).collect::<Vec<_>>());
            let rhs = op.dirichlet(&vals);
            Ok(DualRow {
                observable: f.name(),
                lhs,
                rhs,
                holds: lhs >= rhs * (1.0 - 1e-9),
            })
        })
        .collect::<Result<_>>()?;
    let all_hold = rows.iter().all(|r| r.holds);
    if let Some(bad) = rows.iter().find(|r| !r.holds) {
        return Err(Error::Residual(format!(
            "dual inequality violated for {}: {} < {}",
            bad.observable, bad.lhs, bad.rhs
        )));
    }
    Ok(DualReport {
        poincare: p,
        rows,
        all_hold,
    })
}

/// `Ent((1+εf)²)/(2ε² Var f)` under `σ_M` by quadrature, with `f` centred
/// and scaled to unit variance. It behaves like `1 + ε·skew(f)/3`.
pub fn entropy_linearization_ratio(q: &SigmaQuadrature, f: &[f64], eps: f64) -> f64 {
    let mean = q.expect_values(f);
    let var = q.expect_values(&f.iter().map(|v| (v - mean).powi(2)).collect::<Vec<_>>());
    let sd = var.sqrt();
    let g2: Vec<f64> = f.iter().map(|v| (1.0 + eps * (v - mean) / sd).powi(2)).collect();
    let z = q.expect_values(&g2);
    let ent = q.expect_values(
        &g2.iter()
            .map(|w| if *w > 0.0 { w * w.ln() } else { 0.0 })
            .collect::<Vec<_>>(),
    ) - z * z.ln();
    ent / (2.0 * eps * eps)
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureRow {
    pub x1: f64,
    pub phi2: Estimate,
    /// MC error above 20% of `|1 - φ''|`.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OneSpinReport {
    pub n: usize,
    pub total: f64,
    pub rows: Vec<CurvatureRow>,
    pub min_phi2: Estimate,
    /// `n(1 - min φ'')`, the constant in `φ'' ≥ 1 - C/n`.
    pub c_fit: f64,
}

/// `φ''(x₁) = 1 - cov_{σ_{M-x₁}}(V'(x₂), V'(x₃))`, the covariance estimated
/// by MALA on the `(n-1)`-coordinate model with total `M - x₁`, pooled over
/// all site pairs.
pub fn one_spin_curvature(
    m: &ConservativeModel,
    x1_grid: &[f64],
    c: &ChainConfig,
) -> Result<OneSpinReport> {
    if m.n < 2 {
        return Err(Error::InvalidInput(
            "the one-spin curvature needs n >= 2".into(),
        ));
    }
    if x1_grid.is_empty() {
        return Err(Error::InvalidInput("empty x1 grid".into()));
    }
    let rows: Vec<CurvatureRow> = x1_grid
        .par_iter()
        .enumerate()
        .map(|(k, &x1)| {
            let sub = m.with(m.n - 1, m.total - x1)?;
            let batch = sampler::sample_sigma(&sub, &c.with_seed(derive_seed(c.seed, k as u64)))?;
            let cov = sampler::pooled_force_covariance(&sub, &batch.lifted(&sub));
            let phi2 = Estimate {
                value: 1.0 - cov.value,
                ..cov
            };
            Ok(CurvatureRow {
                x1,
                phi2,
                flagged: cov.err > 0.2 * cov.value.abs(),
            })
        })
        .collect::<Result<_>>()?;
    let min_row = rows
        .iter()
        .min_by(|a, b| a.phi2.value.total_cmp(&b.phi2.value))
        .expect("non-empty");
    Ok(OneSpinReport {
        n: m.n,
        total: m.total,
        min_phi2: min_row.phi2,
        c_fit: m.n as f64 * (1.0 - min_row.phi2.value),
        rows,
    })
}

/// `log ∫ exp(-H)` for a model with `n ≤ 2` free coordinates by tensor
/// Gauss–Legendre on the default window.
fn log_partition(m: &ConservativeModel, q: usize) -> Result<f64> {
    let n = m.n;
    if n > 2 {
        return Err(Error::InvalidInput("log_partition supports n <= 2".into()));
    }
    let c = m.site_mean();
    let (axis, w) = GaussLegendre::new(q).on(c - DEFAULT_HALF_WIDTH, c + DEFAULT_HALF_WIDTH);
    let len = q.pow(n as u32);
    let mut terms = Vec::with_capacity(len);
    let mut x = vec![0.0; n];
    for idx in 0..len {
        let mut r = idx;
        let mut lw = 0.0;
        for d in (0..n).rev() {
            x[d] = axis[r % q];
            lw += w[r % q].ln();
            r /= q;
        }
        terms.push(lw - m.energy_unchecked(&x));
    }
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln())
}

/// `φ''(x₁)` for `n ∈ {2, 3}` from the marginal: `φ(x₁) = x₁²/2 - log Z_{n-1}(M - x₁)`,
/// differentiated by a five-point stencil.
pub fn one_spin_curvature_quadrature(m: &ConservativeModel, x1_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(2..=3).contains(&m.n) {
        return Err(Error::InvalidInput(
            "quadrature cross-check needs n in {2, 3}".into(),
        ));
    }
    let h = 0.05;
    let q = 96;
    let phi = |x1: f64| -> Result<f64> {
        let sub = m.with(m.n - 1, m.total - x1)?;
        Ok(0.5 * x1 * x1 - log_partition(&sub, q)?)
    };
    x1_grid
        .iter()
        .map(|&x| {
            let (a, b, c, d, e) = (phi(x - 2.0 * h)?, phi(x - h)?, phi(x)?, phi(x + h)?, phi(x + 2.0 * h)?);
            Ok((x, (-a + 16.0 * b - 30.0 * c + 16.0 * d - e) / (12.0 * h * h)))
        })
        .collect()
}

/// Unnormalized density `e^{-W}` tabulated on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct Tabulated1D {
    pub x: Vec<f64>,
    /// `W = -log density`, up to an additive constant.
    pub potential: Vec<f64>,
}

impl Tabulated1D {
    pub fn from_potential(x: Vec<f64>, potential: Vec<f64>) -> Result<Self> {
        if x.len() != potential.len() || x.len() < 16 {
            return Err(Error::InvalidInput(
                "tabulated density needs >= 16 matching nodes".into(),
            ));
        }
        let h = x[1] - x[0];
        if !(h > 0.0) || x.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
            return Err(Error::InvalidInput("tabulation grid must be uniform and increasing".into()));
        }
        if potential.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("density must be positive on its window".into()));
        }
        Ok(Self { x, potential })
    }

    fn weights(&self) -> Vec<f64> {
        let lo = self.potential.iter().cloned().fold(f64::INFINITY, f64::min);
        let p: Vec<f64> = self.potential.iter().map(|w| (-(w - lo)).exp()).collect();
        let z: f64 = p.iter().sum();
        p.into_iter().map(|v| v / z).collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LsiBracket {
    pub lsi_lower: f64,
    pub lsi_upper: f64,
    /// Muckenhoupt-type lower bound `B`.
    pub muckenhoupt: f64,
    /// `2/λ₂` of the one-dimensional grid generator.
    pub twice_poincare: f64,
    /// Curvature and centre of the comparison Gaussian used for the upper bound.
    pub kappa: f64,
    pub center: f64,
}

/// Bracket on the log-Sobolev constant of a one-dimensional measure.
///
/// Lower: `max(B, 2P)` where `P` is the grid spectral gap inverse and
/// `B = max_± sup μ(tail beyond x) ∫_median^x 1/p`, using `P ≥ B/2` and `L ≥ 2P`.
/// Upper: Holley–Stroock against `N(x₀, 1/κ)`, `L ≤ (2/κ) e^{osc(W - κ(x-x₀)²/2)}`,
/// minimized over `κ` and `x₀`.
pub fn one_d_lsi_criterion(density: &Tabulated1D) -> Result<LsiBracket> {
    let p = density.weights();
    let len = p.len();
    let top = p.iter().cloned().fold(0.0, f64::max);
    if p[0] > 1e-8 * top || p[len - 1] > 1e-8 * top {
        return Err(Error::Domain(
            "tails are not negligible at the window edges".into(),
        ));
    }
    let x = &density.x;
    let h = x[1] - x[0];
    // Cumulative mass and median.
    // Left and right masses summed from their own ends to avoid cancellation.
    let mut cdf = vec![0.0; len];
    let mut tail = vec![0.0; len];
    let mut acc = 0.0;
    for i in 0..len {
        acc += p[i];
        cdf[i] = acc;
    }
    acc = 0.0;
    for i in (0..len).rev() {
        acc += p[i];
        tail[i] = acc;
    }
    let med = cdf.partition_point(|&c| c < 0.5).min(len - 1);
    // Density per unit length is p/h.
    let mut muck: f64 = 0.0;
    let mut inv = 0.0;
    for i in med..len {
        inv += h * h / p[i].max(1e-300);
        muck = muck.max(tail[i] * inv);
    }
    inv = 0.0;
    for i in (0..=med).rev() {
        inv += h * h / p[i].max(1e-300);
        muck = muck.max(cdf[i] * inv);
    }
    // Grid generator in one dimension.
    let inv_h2 = 1.0 / (h * h);
    let w = &density.potential;
    let rows = (0..len)
        .map(|i| {
            let mut r = Vec::new();
            let mut d = 0.0;
            for j in [i.wrapping_sub(1), i + 1] {
                if j < len {
                    d += (-(w[j] - w[i]) / 2.0).exp();
                    r.push((j, -inv_h2));
                }
            }
            r.push((i, d * inv_h2));
            r
        })
        .collect();
    let a = CsrMatrix::from_rows(rows);
    let null: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let lambda2 = sparse::smallest_eigenpairs(&a, &null, 1, 3, EIGEN_TOL, 3)?.values[0];
    let twice_poincare = 2.0 / lambda2;
    // Holley–Stroock: scan the comparison Gaussian.
    let mean: f64 = x.iter().zip(&p).map(|(a, b)| a * b).sum();
    let var: f64 = x.iter().zip(&p).map(|(a, b)| b * (a - mean).powi(2)).sum();
    let sd = var.sqrt();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for ci in 0..=40 {
        let x0 = mean + sd * (ci as f64 / 20.0 - 1.0);
        for ki in 0..=120 {
            let kappa = (1.0 / var) * 10f64.powf(ki as f64 / 60.0 - 1.0);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (xi, wi) in x.iter().zip(w) {
                let r = wi - 0.5 * kappa * (xi - x0).powi(2);
                lo = lo.min(r);
                hi = hi.max(r);
            }
            let bound = 2.0 / kappa * (hi - lo).exp();
            if bound < best.0 {
                best = (bound, kappa, x0);
            }
        }
    }
    Ok(LsiBracket {
        lsi_lower: muck.max(twice_poincare),
        lsi_upper: best.0,
        muckenhoupt: muck,
        twice_poincare,
        kappa: best.1,
        center: best.2,
    })
}

/// One-spin marginal of `σ_M` tabulated from `W'(x₁) = V'(x₁) - ⟨V'⟩_{σ_{M-x₁}}`
/// (the pooled site-force mean of the reduced model), integrated by the
/// trapezoid rule on `nodes` points spanning `±half_width_sd` marginal
/// standard deviations.
pub fn one_spin_marginal(
    m: &ConservativeModel,
    nodes: usize,
    half_width_sd: f64,
    c: &ChainConfig,
) -> Result<Tabulated1D> {
    if m.n < 2 {
        return Err(Error::InvalidInput("the one-spin marginal needs n >= 2".into()));
    }
    let nn = m.n as f64;
    let sd = (nn / (nn + 1.0)).sqrt();
    let c0 = m.site_mean();
    let x: Vec<f64> = (0..nodes)
        .map(|k| c0 - half_width_sd * sd + 2.0 * half_width_sd * sd * k as f64 / (nodes - 1) as f64)
        .collect();
    let dw: Vec<f64> = x
        .par_iter()
        .enumerate()
        .map(|(k, &x1)| {
            let sub = m.with(m.n - 1, m.total - x1)?;
            let batch = sampler::sample_sigma(&sub, &c.with_seed(derive_seed(c.seed, k as u64)))?;
            let lifted = batch.lifted(&sub);
            let mean_force = lifted
                .rows()
                .map(|r| r.iter().map(|&u| sub.site_force(u)).sum::<f64>())
                .sum::<f64>()
                / (lifted.samples() * lifted.dim) as f64;
            Ok(m.site_force(x1) - mean_force)
        })
        .collect::<Result<_>>()?;
    let mut w = vec![0.0; nodes];
    for k in 1..nodes {
        w[k] = w[k - 1] + 0.5 * (x[k] - x[k - 1]) * (dw[k] + dw[k - 1]);
    }
    Tabulated1D::from_potential(x, w)
}

/// Dense cross-check of the grid spectrum (small grids only).
pub fn dense_gap(op: &GridOperator) -> f64 {
    let a: DMatrix<f64> = op.a.to_dense();
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    ev[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{perturbative_poincare_constant, PerturbationSpec};
    use approx::assert_abs_diff_eq;

    fn gauss(n: usize, total: f64) -> ConservativeModel {
        ConservativeModel::new(n, total, PerturbationSpec::zero()).unwrap()
    }

    #[test]
    fn gaussian_gaps_match_precision_spectrum() {
        // n = 1: H'' = 2, P = 1/2. n = 2: min eigenvalue of I + 𝟏 is 1.
        let r1 = generator_gap(&gauss(1, 0.7), &GridSpec::default()).unwrap();
        assert!((r1.poincare_estimate - 0.5).abs() < 2e-3, "{r1:?}");
        let r2 = generator_gap(&gauss(2, 0.0), &GridSpec::default()).unwrap();
        assert!((r2.poincare_estimate - 1.0).abs() < 5e-3, "{r2:?}");
        assert!(r2.error_estimate < 5e-3);
    }

    #[test]
    fn sparse_gap_matches_dense_solve() {
        let m = ConservativeModel::new(2, 0.3, PerturbationSpec::sine(0.2)).unwrap();
        let op = GridOperator::new(&m, &GridSpec { nodes: 16, half_width_sd: 5.0 }).unwrap();
        assert_abs_diff_eq!(op.eigen(1).unwrap().0[0], dense_gap(&op), epsilon = 1e-8);
    }

    #[test]
    fn perturbed_gap_is_within_perturbative_bound() {
        let bound = perturbative_poincare_constant(0.1).unwrap();
        for n in [1, 2] {
            let m = ConservativeModel::new(n, 0.0, PerturbationSpec::sine(0.05)).unwrap();
            let r = generator_gap(&m, &GridSpec::default()).unwrap();
            assert!(r.poincare_estimate <= bound + r.error_estimate);
            let be = bakry_emery(&m, &GridSpec::default()).unwrap();
            assert!(r.poincare_estimate <= be.poincare_estimate + r.error_estimate);
        }
    }

    #[test]
    fn gap_converges_under_refinement() {
        let m = ConservativeModel::new(2, 1.0, PerturbationSpec::sine(0.1)).unwrap();
        let a = generator_gap(&m, &GridSpec { nodes: 64, half_width_sd: 5.0 }).unwrap();
        let b = generator_gap(&m, &GridSpec { nodes: 128, half_width_sd: 5.0 }).unwrap();
        assert!((a.poincare_estimate - b.poincare_estimate).abs() < 0.01 * b.poincare_estimate);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let m = ConservativeModel::new(1, 0.0, PerturbationSpec::sine(0.3)).unwrap();
        let r = generator_gap(&m, &GridSpec { nodes: 16, half_width_sd: 12.0 });
        assert!(matches!(r, Err(Error::Resolution(_))), "{r:?}");
    }

    #[test]
    fn gaussian_invariant_in_total() {
        let a = generator_gap(&gauss(2, 0.0), &GridSpec::default()).unwrap();
        let b = generator_gap(&gauss(2, 3.0), &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(a.poincare_estimate, b.poincare_estimate, epsilon = 1e-8);
    }

    #[test]
    fn gaussian_lsi_constant_is_two() {
        let opts = LsiOptions {
            random_starts: 4,
            ..LsiOptions::default()
        };
        let r = lsi_constant_grid_with(&gauss(1, 0.0), &GridSpec::default(), &opts).unwrap();
        // n = 1: H'' = 2, L = 1.
        let l = r.lsi_estimate.unwrap();
        assert!((l - 1.0).abs() < 0.02, "{r:?}");
        assert!(l + 1e-6 >= 2.0 * r.poincare_estimate - r.error_estimate);
        assert_abs_diff_eq!(r.lsi_upper.unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_linearization_tends_to_one() {
        let m = ConservativeModel::new(2, 0.5, PerturbationSpec::sine(0.1)).unwrap();
        let q = SigmaQuadrature::new(&m, 48).unwrap();
        for f in Observable::decomposition_dictionary(2) {
            let vals = q.tabulate(|x| f.eval(&m, x));
            let mean = q.expect_values(&vals);
            let sd = q.expect_values(&vals.iter().map(|v| (v - mean).powi(2)).collect::<Vec<_>>()).sqrt();
            let skew = q.expect_values(&vals.iter().map(|v| ((v - mean) / sd).powi(3)).collect::<Vec<_>>());
            let eps = 1e-3;
            let r = entropy_linearization_ratio(&q, &vals, eps);
            assert!((r - 1.0 - eps * skew / 3.0).abs() < 10.0 * eps * eps, "{}: {r}", f.name());
            if skew.abs() <= 3.0 {
                assert!((r - 1.0).abs() <= eps, "{}: {r}", f.name());
            }
        }
    }

    #[test]
    fn dual_inequality_holds_on_grid() {
        let m = ConservativeModel::new(2, 0.0, PerturbationSpec::sine(0.1)).unwrap();
        let mut dict = Observable::decomposition_dictionary(2);
        dict.push(Observable::Const { c: 2.0 });
        let r = dual_characterization_check(&m, &GridSpec::default(), &dict).unwrap();
        assert!(r.all_hold);
        let c = r.rows.last().unwrap();
        assert!(c.lhs.abs() < 1e-12 && c.rhs.abs() < 1e-12);
    }

    #[test]
    fn quadrature_curvature_gaussian() {
        for n in [2, 3] {
            let pts = one_spin_curvature_quadrature(&gauss(n, 0.4), &[-1.0, 0.0, 2.0]).unwrap();
            for (_, v) in pts {
                assert_abs_diff_eq!(v, 1.0 + 1.0 / n as f64, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn one_d_criterion_brackets_gaussian() {
        for s2 in [1.0, 0.25, 4.0] {
            let sd: f64 = f64::sqrt(s2);
            let x: Vec<f64> = (0..2001).map(|k| -10.0 * sd + 20.0 * sd * k as f64 / 2000.0).collect();
            let w: Vec<f64> = x.iter().map(|v| v * v / (2.0 * s2)).collect();
            let b = one_d_lsi_criterion(&Tabulated1D::from_potential(x, w).unwrap()).unwrap();
            assert!(b.lsi_lower <= 2.0 * s2 * (1.0 + 1e-4), "{b:?}");
            assert!(b.lsi_upper >= 2.0 * s2 * (1.0 - 1e-9), "{b:?}");
            assert!(b.lsi_upper / b.lsi_lower < 1.01, "{b:?}");
        }
    }

    #[test]
    fn one_d_criterion_rejects_heavy_window() {
        let x: Vec<f64> = (0..100).map(|k| k as f64 * 0.01).collect();
        let w = vec![0.0; 100];
        assert!(matches!(
            one_d_lsi_criterion(&Tabulated1D::from_potential(x, w).unwrap()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn variational_gaussian_difference_is_sharp() {
        let m = gauss(2, 0.0);
        let c = ChainConfig {
            samples: 30_000,
            seed: 4,
            ..ChainConfig::default()
        };
        let batch = sampler::sample_sigma(&m, &c).unwrap();
        let dict = vec![
            Observable::Diff { i: 0, j: 1 },
            Observable::Coord { i: 0 },
            Observable::Const { c: 1.0 },
        ];
        let r = variational_gap_lower_bound(&m, &batch, &dict).unwrap();
        assert_eq!(r.best, "x1-x2");
        assert!(r.bound.within(1.0, 4.0), "{:?}", r.bound);
        assert_eq!(r.skipped, vec!["const(1)".to_string()]);
    }
}
