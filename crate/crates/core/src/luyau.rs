//! Martingale decomposition of variance and entropy along the filtration
//! generated by `x₁, x₂, …`, the conditional-expectation gradient identity,
//! and the covariance-splitting experiment for `S = Σ V'(y_i)`.
//!
//! Conditioning on the first `k` coordinates of `σ_M` leaves the measure
//! `σ^{(k)}` of the model with `n - k` free sites and total `M - Σ_{i≤k} x_i`.
//! Write `f_k = ⟨f | x₁..x_k⟩`. Differentiating the conditional density gives
//!
//! `∂_k f_k = ⟨∂_k f⟩_{σ^{(k)}} + cov_{σ^{(k)}}(f, V'(M - Σx))`,
//!
//! where `∂_k` acts at fixed `x_{k+1..n}` (so the last site moves).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConservativeModel;
use crate::observable::Observable;
use crate::quadrature::{SigmaQuadrature, MAX_DIM};
use crate::sampler::{derive_seed, sample_sigma, ChainConfig};
use crate::stats::{self, Estimate};
use crate::tol;

/// Finite-difference step for `∂_k f_k`.
const FD_STEP: f64 = 1e-2;
/// Per-axis offsets from the site mean at which identities are tested.
const TEST_OFFSETS: [f64; 3] = [-0.8, 0.0, 0.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TowerMode {
    /// Tensor Gauss–Legendre with `nodes` per axis; `n <= 3`.
    Quadrature { nodes: usize },
    /// Outer chain for the conditioning points, one inner chain per point.
    NestedMc { outer: ChainConfig, inner: ChainConfig },
}

/// Conditional expectations `f ↦ f_k` for a fixed coordinate ordering.
#[derive(Debug, Clone)]
pub struct ConditionalTower {
    pub model: ConservativeModel,
    /// `order[j]` is the original coordinate conditioned on at level `j + 1`.
    pub order: Vec<usize>,
    pub mode: TowerMode,
}

impl ConditionalTower {
    pub fn quadrature(m: &ConservativeModel, nodes: usize, order: Vec<usize>) -> Result<Self> {
        if m.n > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "quadrature tower supports n <= {MAX_DIM}, got {}",
                m.n
            )));
        }
        if nodes < 16 {
            return Err(Error::InvalidInput(format!(
                "quadrature tower needs at least 16 nodes per axis, got {nodes}"
            )));
        }
        Self::build(m, TowerMode::Quadrature { nodes }, order)
    }

    pub fn nested_mc(
        m: &ConservativeModel,
        outer: ChainConfig,
        inner: ChainConfig,
        order: Vec<usize>,
    ) -> Result<Self> {
        outer.validate()?;
        inner.validate()?;
        Self::build(m, TowerMode::NestedMc { outer, inner }, order)
    }

    fn build(m: &ConservativeModel, mode: TowerMode, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; m.n];
        if order.len() != m.n {
            return Err(Error::Dimension {
                expected: m.n,
                got: order.len(),
            });
        }
        for &o in &order {
            if o >= m.n || seen[o] {
                return Err(Error::InvalidInput(format!("{order:?} is not a permutation")));
            }
            seen[o] = true;
        }
        Ok(Self {
            model: m.clone(),
            order,
            mode,
        })
    }

    /// Point in original coordinates from ordered coordinates `z`.
    pub fn reorder(&self, z: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; z.len()];
        for (j, &o) in self.order.iter().enumerate() {
            x[o] = z[j];
        }
        x
    }

    /// Model of the sites left free after conditioning on `prefix`.
    pub fn sub_model(&self, prefix: &[f64]) -> Result<ConservativeModel> {
        let m = &self.model;
        if prefix.len() > m.n {
            return Err(Error::Dimension {
                expected: m.n,
                got: prefix.len(),
            });
        }
        m.with(m.n - prefix.len(), m.total - prefix.iter().sum::<f64>())
    }

    fn nodes(&self) -> Result<usize> {
        match self.mode {
            TowerMode::Quadrature { nodes } => Ok(nodes),
            TowerMode::NestedMc { .. } => Err(Error::InvalidInput(
                "this check needs a quadrature tower".into(),
            )),
        }
    }

    /// `⟨f | x_{order[0..k]} = prefix⟩` with `f` in original coordinates.
    pub fn conditional(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync), prefix: &[f64]) -> Result<Estimate> {
        let sub = self.sub_model(prefix)?;
        let k = prefix.len();
        if sub.n == 0 {
            return Ok(Estimate::exact(f(&self.reorder(prefix))));
        }
        let mut z = prefix.to_vec();
        z.resize(self.model.n, 0.0);
        match &self.mode {
            TowerMode::Quadrature { nodes } => {
                let q = quad(&sub, *nodes)?;
                let v = q.expect(|rest| {
                    z[k..].copy_from_slice(rest);
                    f(&self.reorder(&z))
                });
                Ok(Estimate::exact(v))
            }
            TowerMode::NestedMc { inner, .. } => {
                let seed = derive_seed(inner.seed, prefix_key(prefix));
                let batch = sample_sigma(&sub, &inner.with_seed(seed))?;
                Ok(batch.estimate(|rest| {
                    z[k..].copy_from_slice(rest);
                    f(&self.reorder(&z))
                }))
            }
        }
    }

    /// `|⟨f_k | prefix⟩ - f_{k-1}(prefix)|` with `k = prefix.len() + 1`,
    /// both sides integrated independently.
    pub fn tower_residual(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync), prefix: &[f64]) -> Result<f64> {
        let nodes = self.nodes()?;
        let sub = self.sub_model(prefix)?;
        if sub.n == 0 {
            return Err(Error::InvalidInput("prefix already fixes every coordinate".into()));
        }
        let direct = self.conditional(f, prefix)?.value;
        let q = quad(&sub, nodes)?;
        // The outer integrand depends on the next coordinate only.
        let mut inner: HashMap<u64, f64> = HashMap::new();
        let mut p = prefix.to_vec();
        p.push(0.0);
        for &a in &q.axis {
            *p.last_mut().unwrap() = a;
            inner.insert(a.to_bits(), self.conditional(f, &p)?.value);
        }
        let nested = q.expect(|rest| inner[&rest[0].to_bits()]);
        Ok((direct - nested).abs())
    }
}

/// Tail mass neglected by the tower's quadrature windows.
pub const TAIL_TOL: f64 = 1e-13;

fn quad(m: &ConservativeModel, nodes: usize) -> Result<SigmaQuadrature> {
    SigmaQuadrature::tight(m, nodes, TAIL_TOL)
}

fn prefix_key(prefix: &[f64]) -> u64 {
    prefix
        .iter()
        .fold(prefix.len() as u64, |h, v| derive_seed(h, v.to_bits()))
}

/// Sorts coordinates so that `⟨|∂_k f|²⟩` is non-increasing; ties (relative
/// `1e-12`) keep the original order. Quadrature for `n <= 3`, else `chain`.
pub fn order_coordinates(
    m: &ConservativeModel,
    grad: impl Fn(&[f64], &mut [f64]) + Sync,
    chain: Option<&ChainConfig>,
) -> Result<Vec<usize>> {
    let n = m.n;
    let mut g = vec![0.0; n];
    let means: Vec<f64> = if n <= MAX_DIM {
        let q = quad(m, 64)?;
        let mut acc = vec![0.0; n];
        let mut x = vec![0.0; n];
        for (idx, w) in q.weights.iter().enumerate() {
            q.point(idx, &mut x);
            grad(&x, &mut g);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += w * v * v;
            }
        }
        acc
    } else {
        let c = chain.ok_or_else(|| {
            Error::InvalidInput(format!("ordering at n = {n} needs a chain configuration"))
        })?;
        let batch = sample_sigma(m, c)?;
        let mut acc = vec![0.0; n];
        for r in batch.rows() {
            grad(r, &mut g);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v * v;
            }
        }
        acc.iter().map(|a| a / batch.samples() as f64).collect()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&i, &j| {
        let (a, b) = (means[i], means[j]);
        if (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) {
            std::cmp::Ordering::Equal
        } else {
            b.total_cmp(&a)
        }
    });
    Ok(perm)
}

pub fn order_for_observable(
    m: &ConservativeModel,
    f: &Observable,
    chain: Option<&ChainConfig>,
) -> Result<Vec<usize>> {
    f.validate(m.n)?;
    order_coordinates(m, |x, out| f.grad(m, x, out), chain)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    /// `t_k` for `k = 1..n`.
    pub terms: Vec<f64>,
    /// Variance or entropy from an independent computation.
    pub total: f64,
    /// `|Σ t_k - total|`.
    pub reconstruction_error: f64,
    /// Largest gap between the one-spin form of `t_k` and its n-dimensional
    /// definition (quadrature only).
    pub one_spin_residual: f64,
}

impl DecompositionReport {
    pub fn relative_error(&self) -> f64 {
        self.reconstruction_error / self.total.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Copy)]
enum Functional {
    Variance,
    Entropy,
}

impl Functional {
    fn phi(self, v: f64) -> f64 {
        match self {
            Self::Variance => v * v,
            Self::Entropy if v > 0.0 => v * v.ln(),
            Self::Entropy => 0.0,
        }
    }

    /// `⟨φ(g)⟩ - φ(⟨g⟩)` for weights `w` (not necessarily normalized).
    fn of(self, w: &[f64], g: &[f64]) -> f64 {
        let z: f64 = w.iter().sum();
        if z <= 0.0 {
            return 0.0;
        }
        let mean = w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / z;
        match self {
            Self::Variance => w.iter().zip(g).map(|(a, b)| a * (b - mean).powi(2)).sum::<f64>() / z,
            Self::Entropy => {
                w.iter().zip(g).map(|(a, b)| a * self.phi(*b)).sum::<f64>() / z - self.phi(mean)
            }
        }
    }
}

/// `Var(f) = Σ_k ⟨Var_{σ^{(k-1)}}(f_k)⟩`.
pub fn variance_decomposition(
    tower: &ConditionalTower,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<DecompositionReport> {
    decompose(tower, f, Functional::Variance)
}

/// `Ent(g) = Σ_k ⟨Ent_{σ^{(k-1)}}(g_k)⟩` for `g > 0`.
pub fn entropy_decomposition(
    tower: &ConditionalTower,
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<DecompositionReport> {
    decompose(tower, g, Functional::Entropy)
}

fn decompose(
    tower: &ConditionalTower,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    kind: Functional,
) -> Result<DecompositionReport> {
    match &tower.mode {
        TowerMode::Quadrature { nodes } => decompose_quadrature(tower, f, kind, *nodes),
        TowerMode::NestedMc { outer, .. } => decompose_nested(tower, f, kind, outer),
    }
}

fn decompose_quadrature(
    tower: &ConditionalTower,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    kind: Functional,
    nodes: usize,
) -> Result<DecompositionReport> {
    let m = &tower.model;
    let n = m.n;
    let q = quad(m, nodes)?;
    let vals = q.tabulate(|z| f(&tower.reorder(z)));
    if let Functional::Entropy = kind {
        if let Some(v) = vals.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!(
                "entropy decomposition needs a positive function, got {v:.3e} on the grid"
            )));
        }
    }
    // levels[k] = (weights, conditional values) indexed by the ordered prefix.
    let mut levels: Vec<(Vec<f64>, Vec<f64>)> = vec![(q.weights.clone(), vals)];
    for _ in 0..n {
        let (w, v) = levels.last().unwrap();
        let len = w.len() / nodes;
        let mut wn = vec![0.0; len];
        let mut vn = vec![0.0; len];
        for b in 0..len {
            let (mut sw, mut sv) = (0.0, 0.0);
            for c in b * nodes..(b + 1) * nodes {
                sw += w[c];
                sv += w[c] * v[c];
            }
            wn[b] = sw;
            vn[b] = if sw > 0.0 { sv / sw } else { 0.0 };
        }
        levels.push((wn, vn));
    }
    levels.reverse();
    let mut terms = Vec::with_capacity(n);
    let mut one_spin_residual: f64 = 0.0;
    for k in 1..=n {
        let (wk, vk) = &levels[k];
        let parents = levels[k - 1].0.len();
        // One-spin form: a weighted functional in x_k for each parent block.
        let mut t = 0.0;
        for b in 0..parents {
            let r = b * nodes..(b + 1) * nodes;
            let pw: f64 = wk[r.clone()].iter().sum();
            t += pw * kind.of(&wk[r.clone()], &vk[r]);
        }
        // n-dimensional definition: integrate ⟨φ(f_k) | x_{<k}⟩ - φ(f_{k-1})
        // against the full weights.
        let stride = nodes.pow((n - k) as u32);
        let mut full = 0.0;
        for (idx, w) in levels[n].0.iter().enumerate() {
            let fk = vk[idx / stride];
            let fk1 = levels[k - 1].1[idx / (stride * nodes)];
            full += w * match kind {
                Functional::Variance => (fk - fk1).powi(2),
                Functional::Entropy => kind.phi(fk) - kind.phi(fk1),
            };
        }
        one_spin_residual = one_spin_residual.max((t - full).abs());
        terms.push(t);
    }
    let check = quad(m, nodes + nodes / 2)?;
    let cvals = check.tabulate(|z| f(&tower.reorder(z)));
    let total = kind.of(&check.weights, &cvals);
    // Floor for totals that vanish (constant f): roundoff relative to ⟨|φ(f)|⟩.
    let scale = check.expect_values(&cvals.iter().map(|v| kind.phi(*v).abs()).collect::<Vec<_>>());
    let sum: f64 = terms.iter().sum();
    let report = DecompositionReport {
        reconstruction_error: (sum - total).abs(),
        terms,
        total,
        one_spin_residual,
    };
    if report.reconstruction_error > tol::DECOMPOSITION_REL * total.abs() + 1e-12 * scale {
        return Err(Error::Resolution(format!(
            "decomposition misses the total by {:.2e} (relative) at {nodes} nodes",
            report.relative_error()
        )));
    }
    Ok(report)
}

/// Exploratory: `t_k = ⟨φ(f_k)⟩ - ⟨φ(f_{k-1})⟩` with `f_k` from inner chains
/// at outer draws. For the variance the inner noise `err²` is subtracted; the
/// reconstruction error is the outer standard error of the total.
fn decompose_nested(
    tower: &ConditionalTower,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    kind: Functional,
    outer: &ChainConfig,
) -> Result<DecompositionReport> {
    let m = &tower.model;
    let n = m.n;
    let batch = sample_sigma(m, outer)?;
    // Ordered coordinates of every outer draw.
    let rows: Vec<Vec<f64>> = batch
        .rows()
        .map(|x| tower.order.iter().map(|&o| x[o]).collect())
        .collect();
    let fvals: Vec<f64> = batch.rows().map(f).collect();
    if let Functional::Entropy = kind {
        if fvals.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("entropy decomposition needs a positive function".into()));
        }
    }
    let mean_f = stats::mean(&fvals);
    let phi_mean = |xs: &[f64]| xs.iter().map(|v| kind.phi(*v)).sum::<f64>() / xs.len() as f64;
    // level_means[k] = ⟨φ(f_k)⟩, k = 0..n.
    let mut level_means = vec![kind.phi(mean_f)];
    for k in 1..n {
        let vals: Vec<f64> = rows
            .par_iter()
            .map(|z| {
                let e = tower.conditional(f, &z[..k])?;
                Ok(match kind {
                    Functional::Variance => e.value * e.value - e.err * e.err,
                    Functional::Entropy => kind.phi(e.value),
                })
            })
            .collect::<Result<_>>()?;
        level_means.push(stats::mean(&vals));
    }
    level_means.push(phi_mean(&fvals));
    let terms: Vec<f64> = level_means.windows(2).map(|w| w[1] - w[0]).collect();
    let total = level_means[n] - level_means[0];
    let phis: Vec<f64> = fvals.iter().map(|v| kind.phi(*v)).collect();
    Ok(DecompositionReport {
        reconstruction_error: stats::estimate_mean(&phis).err,
        terms,
        total,
        one_spin_residual: 0.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub k: usize,
    pub points: usize,
    pub max_residual: f64,
    /// Largest `|LHS|` seen, for scale.
    pub max_lhs: f64,
}

/// Test prefixes: a small tensor grid of offsets around the site mean.
fn test_prefixes(m: &ConservativeModel, k: usize) -> Vec<Vec<f64>> {
    let c = m.site_mean();
    let mut out = vec![vec![]];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                TEST_OFFSETS.iter().map(move |o| {
                    let mut q = p.clone();
                    q.push(c + o);
                    q
                })
            })
            .collect();
    }
    out
}

/// `⟨g⟩`, `⟨f g⟩`, `⟨f⟩` under `σ^{(k)}` at `prefix`, as a covariance.
fn sub_cov(
    tower: &ConditionalTower,
    q: &SigmaQuadrature,
    prefix: &[f64],
    f: &Observable,
    g: impl Fn(&[f64]) -> f64,
) -> f64 {
    let m = &tower.model;
    let k = prefix.len();
    let mut z = prefix.to_vec();
    z.resize(m.n, 0.0);
    let (mut ef, mut eg, mut efg) = (0.0, 0.0, 0.0);
    let mut rest = vec![0.0; m.n - k];
    for (idx, w) in q.weights.iter().enumerate() {
        q.point(idx, &mut rest);
        z[k..].copy_from_slice(&rest);
        let x = tower.reorder(&z);
        let (a, b) = (f.eval(m, &x), g(&x));
        ef += w * a;
        eg += w * b;
        efg += w * a * b;
    }
    efg - ef * eg
}

fn sub_mean_grad(
    tower: &ConditionalTower,
    q: &SigmaQuadrature,
    prefix: &[f64],
    f: &Observable,
    coord: usize,
) -> f64 {
    let m = &tower.model;
    let k = prefix.len();
    let mut z = prefix.to_vec();
    z.resize(m.n, 0.0);
    let mut g = vec![0.0; m.n];
    let mut rest = vec![0.0; m.n - k];
    let mut acc = 0.0;
    for (idx, w) in q.weights.iter().enumerate() {
        q.point(idx, &mut rest);
        z[k..].copy_from_slice(&rest);
        f.grad(m, &tower.reorder(&z), &mut g);
        acc += w * g[coord];
    }
    acc
}

/// Checks `∂_k f_k = ⟨∂_k f⟩ + cov(f, V'(last))` under `σ^{(k)}` on a grid of
/// prefixes, with `∂_k f_k` by a five-point difference.
pub fn gradient_identity_check(tower: &ConditionalTower, f: &Observable, k: usize) -> Result<IdentityReport> {
    let m = &tower.model;
    let nodes = tower.nodes()?;
    f.validate(m.n)?;
    if k == 0 || k >= m.n {
        return Err(Error::InvalidInput(format!(
            "gradient identity needs 1 <= k <= n - 1, got k = {k}, n = {}",
            m.n
        )));
    }
    let fe = |x: &[f64]| f.eval(m, x);
    let prefixes = test_prefixes(m, k);
    let rows: Vec<(f64, f64)> = prefixes
        .par_iter()
        .map(|p| {
            let at = |d: f64| {
                let mut pp = p.clone();
                pp[k - 1] += d;
                tower.conditional(&fe, &pp).map(|e| e.value)
            };
            let h = FD_STEP;
            let lhs = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            let sub = tower.sub_model(p)?;
            let q = quad(&sub, nodes)?;
            let last_force = |x: &[f64]| m.site_force(m.last(x));
            let rhs = sub_mean_grad(tower, &q, p, f, tower.order[k - 1]) + sub_cov(tower, &q, p, f, last_force);
            Ok(((lhs - rhs).abs(), lhs.abs()))
        })
        .collect::<Result<_>>()?;
    finish_identity(k, rows, "gradient identity")
}

/// Checks `cov(f, V'(last)) = (n-k)⁻¹ Σ_{i>k} [cov(f, V'(x_i)) - ⟨∂_i f⟩]`
/// under `σ^{(k)}` for `0 <= k <= n - 1`.
pub fn integration_by_parts_check(
    tower: &ConditionalTower,
    f: &Observable,
    k: usize,
) -> Result<IdentityReport> {
    let m = &tower.model;
    let nodes = tower.nodes()?;
    f.validate(m.n)?;
    if k >= m.n {
        return Err(Error::InvalidInput(format!(
            "integration by parts needs k <= n - 1, got k = {k}, n = {}",
            m.n
        )));
    }
    let free = (m.n - k) as f64;
    let rows: Vec<(f64, f64)> = test_prefixes(m, k)
        .par_iter()
        .map(|p| {
            let sub = tower.sub_model(p)?;
            let q = quad(&sub, nodes)?;
            let lhs = sub_cov(tower, &q, p, f, |x| m.site_force(m.last(x)));
            let mut rhs = 0.0;
            for j in k..m.n {
                let o = tower.order[j];
                rhs += sub_cov(tower, &q, p, f, |x| m.site_force(x[o])) - sub_mean_grad(tower, &q, p, f, o);
            }
            rhs /= free;
            Ok(((lhs - rhs).abs(), lhs.abs()))
        })
        .collect::<Result<_>>()?;
    finish_identity(k, rows, "integration by parts")
}

fn finish_identity(k: usize, rows: Vec<(f64, f64)>, what: &str) -> Result<IdentityReport> {
    let report = IdentityReport {
        k,
        points: rows.len(),
        max_residual: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        max_lhs: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    };
    if report.max_residual > tol::IDENTITY_RESIDUAL {
        return Err(Error::Residual(format!(
            "{what} at k = {k}: residual {:.3e}",
            report.max_residual
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitRow {
    pub observable: String,
    pub n: usize,
    pub block_size: usize,
    pub blocks: usize,
    pub eps: f64,
    pub cov: Estimate,
    /// `cov(f, S)²`.
    pub lhs: f64,
    pub variance: f64,
    /// `n ⟨|∇f|²⟩`.
    pub grad_term: f64,
    /// `cov²/(Var + n⟨|∇f|²⟩)`: the smallest `C_ε` if `C` were zero.
    pub c_eps_implied: f64,
    /// `cov²/(ε n Var)`: the smallest `C` if `C_ε` were zero.
    pub c_implied: f64,
    /// Entropy variant with `g = f²/⟨f²⟩`.
    pub cov_sq_density: Estimate,
    pub ent: f64,
    pub c_eps_implied_ent: f64,
    pub c_implied_ent: f64,
    /// `|cov| > 2 err`.
    pub resolved: bool,
}

/// Block sizes of a partition of `sites` into `⌊sites/K⌋` near-equal runs.
/// Sizes are `K` or `K + 1` once `sites >= K²`; below that the remainder is
/// spread evenly and some runs are longer.
pub fn block_partition(sites: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("block size must be positive".into()));
    }
    if sites < k {
        return Ok(vec![sites]);
    }
    let l = sites / k;
    let (base, extra) = (sites / l, sites % l);
    Ok((0..l).map(|b| base + usize::from(b < extra)).collect())
}

/// Tabulates both sides of the covariance-splitting inequality for each
/// dictionary function and block size, from one chain per model.
pub fn covariance_splitting_experiment(
    m: &ConservativeModel,
    dict: &[Observable],
    k_list: &[usize],
    c: &ChainConfig,
) -> Result<Vec<SplitRow>> {
    for f in dict {
        f.validate(m.n)?;
    }
    if k_list.is_empty() {
        return Err(Error::InvalidInput("empty block-size list".into()));
    }
    let batch = sample_sigma(m, c)?;
    let lifted = batch.lifted(m);
    let n = m.n;
    let s: Vec<f64> = lifted
        .rows()
        .map(|y| y.iter().map(|&u| m.site_force(u)).sum())
        .collect();
    let s_mean = stats::mean(&s);
    let mut rows = Vec::new();
    for f in dict {
        let fv: Vec<f64> = lifted.rows().map(|y| f.eval_lifted(m, y)).collect();
        let f_mean = stats::mean(&fv);
        let cov = stats::estimate_mean(
            &fv.iter()
                .zip(&s)
                .map(|(a, b)| (a - f_mean) * (b - s_mean))
                .collect::<Vec<_>>(),
        );
        let variance = stats::variance(&fv);
        let grad_term = n as f64 * batch.estimate(|x| f.grad_sq(m, x)).value;
        let f2: f64 = fv.iter().map(|v| v * v).sum::<f64>() / fv.len() as f64;
        let (cov_sq_density, ent) = if f2 > 0.0 {
            let g: Vec<f64> = fv.iter().map(|v| v * v / f2).collect();
            let g_mean = stats::mean(&g);
            let cg = stats::estimate_mean(
                &g.iter()
                    .zip(&s)
                    .map(|(a, b)| (a - g_mean) * (b - s_mean))
                    .collect::<Vec<_>>(),
            );
            let ent = g.iter().map(|v| if *v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
                / g.len() as f64
                - g_mean * g_mean.ln();
            (cg, ent)
        } else {
            (Estimate::exact(0.0), 0.0)
        };
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };
        for &k in k_list {
            let blocks = block_partition(n + 1, k)?.len();
            let eps = 1.0 / k as f64;
            let lhs = cov.value * cov.value;
            let lhs_ent = cov_sq_density.value * cov_sq_density.value;
            rows.push(SplitRow {
                observable: f.name(),
                n,
                block_size: k,
                blocks,
                eps,
                cov,
                lhs,
                variance,
                grad_term,
                c_eps_implied: ratio(lhs, variance + grad_term),
                c_implied: ratio(lhs, eps * n as f64 * variance),
                cov_sq_density,
                ent,
                c_eps_implied_ent: ratio(lhs_ent, ent + ratio(grad_term, f2)),
                c_implied_ent: ratio(lhs_ent, eps * n as f64 * ent),
                resolved: cov.value.abs() > 2.0 * cov.err,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::PerturbationSpec;
    use approx::assert_abs_diff_eq;

    fn gauss(n: usize, total: f64) -> ConservativeModel {
        ConservativeModel::new(n, total, PerturbationSpec::zero()).unwrap()
    }

    fn tower(m: &ConservativeModel) -> ConditionalTower {
        ConditionalTower::quadrature(m, 64, (0..m.n).collect()).unwrap()
    }

    #[test]
    fn ordering_examples() {
        let m = gauss(2, 0.0);
        let lin = |_: &[f64], g: &mut [f64]| {
            g[0] = 3.0;
            g[1] = 1.0;
        };
        assert_eq!(order_coordinates(&m, lin, None).unwrap(), vec![0, 1]);
        assert_eq!(
            order_for_observable(&m, &Observable::Coord { i: 1 }, None).unwrap(),
            vec![1, 0]
        );
        let sum = |_: &[f64], g: &mut [f64]| g.iter_mut().for_each(|v| *v = 1.0);
        let m3 = gauss(3, 1.0);
        assert_eq!(order_coordinates(&m3, sum, None).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn gaussian_coordinate_terms() {
        // f = x₁: f₁ = f, so t₁ = Var(x₁) = 2/3 and t₂ = 0.
        let m = gauss(2, 0.0);
        let r = variance_decomposition(&tower(&m), &|x: &[f64]| x[0]).unwrap();
        assert_abs_diff_eq!(r.terms[0], 2.0 / 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.terms[1], 0.0, epsilon = 1e-10);
        assert!(r.one_spin_residual < 1e-8);
    }

    #[test]
    fn gaussian_product_variance() {
        // Jointly normal, zero mean, var 2/3, cov -1/3: Var(xy) = 4/9 + 2/9 - 1/9.
        let m = gauss(2, 0.0);
        let r = variance_decomposition(&tower(&m), &|x: &[f64]| x[0] * x[1]).unwrap();
        assert_abs_diff_eq!(r.total, 5.0 / 9.0, epsilon = 1e-10);
        assert!(r.terms.iter().all(|t| *t >= -1e-10));
    }

    #[test]
    fn single_site_has_one_term() {
        let m = ConservativeModel::new(1, 0.4, PerturbationSpec::sine(0.2)).unwrap();
        let t = tower(&m);
        let v = variance_decomposition(&t, &|x: &[f64]| x[0].sin()).unwrap();
        assert_eq!(v.terms.len(), 1);
        assert_abs_diff_eq!(v.terms[0], v.total, epsilon = 1e-9 * v.total);
        let e = entropy_decomposition(&t, &|x: &[f64]| x[0].exp()).unwrap();
        assert_abs_diff_eq!(e.terms[0], e.total, epsilon = 1e-9 * e.total);
    }

    #[test]
    fn gaussian_entropy_terms_closed_form() {
        // g = e^{x₂}: g₁ = exp((M - x₁)/2 + 1/4), Ent(e^Y) = E[e^Y] Var(Y)/2.
        let total = 0.9;
        let m = gauss(2, total);
        let eg = (total / 3.0 + 1.0 / 3.0).exp();
        let r = entropy_decomposition(&tower(&m), &|x: &[f64]| x[1].exp()).unwrap();
        assert_abs_diff_eq!(r.terms[0], eg / 12.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.terms[1], eg / 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.total, eg / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_has_zero_entropy_terms() {
        let m = ConservativeModel::new(3, 0.0, PerturbationSpec::sine(0.1)).unwrap();
        let t = ConditionalTower::quadrature(&m, 24, vec![2, 0, 1]).unwrap();
        let r = entropy_decomposition(&t, &|_: &[f64]| 2.5).unwrap();
        assert!(r.terms.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn entropy_rejects_sign_change() {
        let m = gauss(2, 0.0);
        assert!(matches!(
            entropy_decomposition(&tower(&m), &|x: &[f64]| x[0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_identity_gaussian_closed_form() {
        // f = x₂, n = 2: f₁ = (M - x₁)/2, so ∂₁f₁ = -1/2.
        let m = gauss(2, 0.5);
        let t = tower(&m);
        let fe = |x: &[f64]| x[1];
        let d = (t.conditional(&fe, &[0.31]).unwrap().value - t.conditional(&fe, &[0.29]).unwrap().value)
            / 0.02;
        assert_abs_diff_eq!(d, -0.5, epsilon = 1e-9);
        let r = gradient_identity_check(&t, &Observable::Coord { i: 1 }, 1).unwrap();
        assert!(r.max_residual < 1e-8, "{r:?}");
        let c = gradient_identity_check(&t, &Observable::Const { c: 1.0 }, 1).unwrap();
        assert!(c.max_lhs < 1e-9);
    }

    #[test]
    fn gradient_identity_perturbed() {
        let m = ConservativeModel::new(3, 0.3, PerturbationSpec::sine(0.1)).unwrap();
        let t = ConditionalTower::quadrature(&m, 48, vec![1, 2, 0]).unwrap();
        for f in [Observable::Product { i: 1, j: 2 }, Observable::ExpCoord { i: 0 }] {
            for k in 1..3 {
                gradient_identity_check(&t, &f, k).unwrap();
            }
        }
    }

    #[test]
    fn integration_by_parts_gaussian_and_sine() {
        // Gaussian, n = 3, k = 1, f = x₂: both sides equal -1/3.
        let m = gauss(3, 0.0);
        let t = ConditionalTower::quadrature(&m, 48, vec![0, 1, 2]).unwrap();
        let q = quad(&t.sub_model(&[0.2]).unwrap(), 48).unwrap();
        let lhs = sub_cov(&t, &q, &[0.2], &Observable::Coord { i: 1 }, |x| m.last(x));
        assert_abs_diff_eq!(lhs, -1.0 / 3.0, epsilon = 1e-10);
        integration_by_parts_check(&t, &Observable::Coord { i: 1 }, 1).unwrap();

        let m = ConservativeModel::new(3, 0.0, PerturbationSpec::sine(0.1)).unwrap();
        let t = ConditionalTower::quadrature(&m, 48, vec![0, 1, 2]).unwrap();
        let r = integration_by_parts_check(&t, &Observable::Product { i: 1, j: 2 }, 1).unwrap();
        assert!(r.max_residual <= 1e-5);
    }

    #[test]
    fn tower_property() {
        let m = ConservativeModel::new(3, 1.0, PerturbationSpec::sine(0.2)).unwrap();
        let t = ConditionalTower::quadrature(&m, 64, vec![0, 1, 2]).unwrap();
        let f = |x: &[f64]| x[0] * x[2] + (x[1]).exp();
        let a = t.tower_residual(&f, &[]).unwrap();
        let b = t.tower_residual(&f, &[0.4]).unwrap();
        assert!(a < 1e-8 && b < 1e-8, "{a:e} {b:e}");
    }

    #[test]
    fn partitions_use_k_or_k_plus_one() {
        assert_eq!(block_partition(9, 4).unwrap(), vec![5, 4]);
        assert_eq!(block_partition(17, 8).unwrap(), vec![9, 8]);
        assert_eq!(block_partition(3, 4).unwrap(), vec![3]);
        for sites in 2..200 {
            for k in [4, 8, 16] {
                let b = block_partition(sites, k).unwrap();
                assert_eq!(b.iter().sum::<usize>(), sites);
                let (lo, hi) = (b.iter().min().unwrap(), b.iter().max().unwrap());
                assert!(hi - lo <= 1);
                if sites >= k * k {
                    assert!(*lo >= k && *hi <= k + 1, "{sites} {k} {b:?}");
                }
            }
        }
    }

    #[test]
    fn gaussian_force_sum_is_constant() {
        let m = gauss(6, 2.0);
        let c = ChainConfig {
            samples: 2_000,
            burn_in: 500,
            ..Default::default()
        };
        let rows = covariance_splitting_experiment(&m, &Observable::decomposition_dictionary(6), &[4], &c)
            .unwrap();
        for r in rows {
            assert!(r.cov.value.abs() < 1e-10, "{r:?}");
        }
    }
}
