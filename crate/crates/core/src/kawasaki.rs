//! Lattice boxes, coordinate-by-coordinate paths and their congestion, the
//! comparison between the mean-field and nearest-neighbour Dirichlet forms,
//! and a nearest-neighbour exchange dynamics for measuring relaxation.
//!
//! Both quadratic forms are written over ordered pairs:
//! `|Λ|⁻¹ Σ_{i,j} (a_i - a_j)² ≤ C_Λ Σ_{|i-j|=1} (a_i - a_j)²`.
//! The left side is `2|a - ā|²` and the right sum is `2 aᵀ L_Λ a`, so the
//! sharp constant is `1/λ₂(L_Λ)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::potential::PerturbationSpec;
use crate::sampler::{derive_seed, pair_update, ChainConfig, PairSampler};
use crate::sparse::{smallest_eigenpairs, CsrMatrix};
use crate::stats::{self, LinearFit};
use crate::tol;

/// Largest box handled by the dense eigensolver.
pub const DENSE_LIMIT: usize = 4096;
/// The coordinate-by-coordinate paths cross any edge at most
/// `2 L^{d-1} ⌊L/2⌋⌈L/2⌉ ≤ C_D L^{d+1}` times.
pub const C_D: f64 = 0.5;
/// A relaxation time is resolved when the chain is this many times longer.
pub const MIN_LENGTH_IN_TAU: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatticeBox {
    pub d: usize,
    pub l: usize,
}

impl LatticeBox {
    pub fn new(d: usize, l: usize) -> Result<Self> {
        if d == 0 || l == 0 {
            return Err(Error::InvalidInput(format!("box needs d, L >= 1, got d = {d}, L = {l}")));
        }
        let sites = (l as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
        if sites > 1 << 24 {
            return Err(Error::InvalidInput(format!("box {l}^{d} is too large")));
        }
        Ok(Self { d, l })
    }

    pub fn sites(&self) -> usize {
        self.l.pow(self.d as u32)
    }

    /// `L^a`: linear-index stride of axis `a` (axis 0 fastest).
    fn stride(&self, a: usize) -> usize {
        self.l.pow(a as u32)
    }

    pub fn coords(&self, idx: usize) -> Vec<usize> {
        let mut r = idx;
        (0..self.d)
            .map(|_| {
                let c = r % self.l;
                r /= self.l;
                c
            })
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().rev().fold(0, |acc, &c| acc * self.l + c)
    }

    /// Nearest-neighbour pairs `(i, i + stride)`, ordered by axis then site.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for a in 0..self.d {
            let s = self.stride(a);
            for i in 0..self.sites() {
                if (i / s) % self.l + 1 < self.l {
                    out.push((i, i + s));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.d * self.l.pow(self.d as u32 - 1) * (self.l - 1)
    }

    /// Graph Laplacian in CSR form.
    pub fn laplacian(&self) -> CsrMatrix {
        let n = self.sites();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut deg = vec![0.0; n];
        for (i, j) in self.edges() {
            rows[i].push((j, -1.0));
            rows[j].push((i, -1.0));
            deg[i] += 1.0;
            deg[j] += 1.0;
        }
        for (i, r) in rows.iter_mut().enumerate() {
            r.push((i, deg[i]));
        }
        CsrMatrix::from_rows(rows)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSystem {
    pub lattice: LatticeBox,
    pub edges: Vec<(usize, usize)>,
    /// Ordered pairs `(i, j)` whose path crosses each edge.
    pub congestion: Vec<u64>,
    pub max_congestion: u64,
    pub max_length: usize,
    /// `Σ_{i≠j} |Γ_ij|`.
    pub total_length: u64,
}

impl PathSystem {
    /// `max_congestion / L^{d+1}`.
    pub fn congestion_constant(&self) -> f64 {
        self.max_congestion as f64 / (self.lattice.l as f64).powi(self.lattice.d as i32 + 1)
    }
}

/// Sites visited from `i` to `j` fixing axis 0, then axis 1, and so on.
pub fn path(lattice: &LatticeBox, i: usize, j: usize) -> Vec<usize> {
    let mut cur = lattice.coords(i);
    let target = lattice.coords(j);
    let mut out = vec![i];
    for a in 0..lattice.d {
        while cur[a] != target[a] {
            if cur[a] < target[a] {
                cur[a] += 1;
            } else {
                cur[a] -= 1;
            }
            out.push(lattice.index(&cur));
        }
    }
    out
}

/// Enumerates every ordered pair's path and counts edge usage.
pub fn build_paths(lattice: &LatticeBox) -> Result<PathSystem> {
    if lattice.l < 2 {
        return Err(Error::InvalidInput("paths need L >= 2".into()));
    }
    let n = lattice.sites();
    let edges = lattice.edges();
    // Edge id of (u, u + stride_a) is stored at a·n + u.
    let mut slot = vec![usize::MAX; lattice.d * n];
    for (e, &(u, v)) in edges.iter().enumerate() {
        let axis = (0..lattice.d).find(|&a| v - u == lattice.stride(a)).expect("edge axis");
        slot[axis * n + u] = e;
    }
    let mut congestion = vec![0u64; edges.len()];
    let (mut max_length, mut total_length) = (0usize, 0u64);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = path(lattice, i, j);
            max_length = max_length.max(p.len() - 1);
            total_length += (p.len() - 1) as u64;
            for w in p.windows(2) {
                let (u, v) = (w[0].min(w[1]), w[0].max(w[1]));
                let axis = (0..lattice.d).find(|&a| v - u == lattice.stride(a)).expect("edge axis");
                congestion[slot[axis * n + u]] += 1;
            }
        }
    }
    let max_congestion = congestion.iter().copied().max().unwrap_or(0);
    Ok(PathSystem {
        lattice: *lattice,
        edges,
        congestion,
        max_congestion,
        max_length,
        total_length,
    })
}

/// Sharp constant `1/λ₂` of the lattice Laplacian.
pub fn comparison_ratio(lattice: &LatticeBox) -> Result<f64> {
    let n = lattice.sites();
    if n < 2 {
        return Err(Error::InvalidInput("comparison needs at least two sites".into()));
    }
    if n > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!(
            "{n} sites exceed the dense limit {DENSE_LIMIT}"
        )));
    }
    let lap = lattice.laplacian();
    let lambda2 = if n <= 512 {
        let eig = SymmetricEigen::new(lap.to_dense());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev[1]
    } else {
        let null = vec![1.0 / (n as f64).sqrt(); n];
        smallest_eigenpairs(&lap, &null, 1, 3, 1e-12, 0)?.values[0]
    };
    if !(lambda2 > tol::EXACT_EIGEN) {
        return Err(Error::NoConvergence(format!("λ₂ = {lambda2:.3e} is not positive")));
    }
    Ok(1.0 / lambda2)
}

/// Dense Laplacian, for cross-checks.
pub fn dense_laplacian(lattice: &LatticeBox) -> DMatrix<f64> {
    lattice.laplacian().to_dense()
}

#[derive(Debug, Clone, Serialize)]
pub struct PathInequality {
    /// `|Λ|⁻¹ Σ_{i,j} (a_i - a_j)²`.
    pub lhs: f64,
    /// `Σ_{|i-j|=1} (a_i - a_j)²` over ordered neighbours.
    pub nn_sum: f64,
    /// `C_path · nn_sum`.
    pub rhs: f64,
    /// `|Λ|⁻¹ · max|Γ| · max congestion / 2`.
    pub constant: f64,
    /// `lhs / nn_sum` (NaN when `a` is constant).
    pub implied: f64,
    pub holds: bool,
}

/// Checks the Cauchy–Schwarz chain along the paths of `paths` for `a`.
pub fn path_inequality_check(paths: &PathSystem, a: &[f64]) -> Result<PathInequality> {
    let lattice = &paths.lattice;
    let n = lattice.sites();
    if a.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.len(),
        });
    }
    let mean = stats::mean(a);
    let lhs = 2.0 * a.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let nn_sum = 2.0 * paths.edges.iter().map(|&(i, j)| (a[i] - a[j]).powi(2)).sum::<f64>();
    let constant = paths.max_length as f64 * paths.max_congestion as f64 / (2.0 * n as f64);
    let rhs = constant * nn_sum;
    Ok(PathInequality {
        lhs,
        nn_sum,
        rhs,
        constant,
        implied: lhs / nn_sum,
        holds: lhs <= rhs * (1.0 + 1e-12) + 1e-300,
    })
}

/// Nearest-neighbour constant from a mean-field one: applying the comparison
/// to `a_i = ∂_i f` turns `P/(n+1) Σ_{i,j}` into `P · C_Λ Σ_{|i-j|=1}`.
pub fn translate_to_kawasaki(constant: f64, n_plus_1: usize, lattice: &LatticeBox) -> Result<f64> {
    if n_plus_1 != lattice.sites() {
        return Err(Error::Dimension {
            expected: lattice.sites(),
            got: n_plus_1,
        });
    }
    if !(constant >= 0.0 && constant.is_finite()) {
        return Err(Error::InvalidInput(format!("constant must be finite and >= 0, got {constant}")));
    }
    if constant == 0.0 {
        return Ok(0.0);
    }
    Ok(constant * comparison_ratio(lattice)?)
}

/// Weights of the slowest Neumann mode along axis 0.
pub fn slow_mode_weights(lattice: &LatticeBox) -> Vec<f64> {
    (0..lattice.sites())
        .map(|i| Observable::slow_weight(i % lattice.l, lattice.l))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct KawasakiRun {
    pub d: usize,
    pub l: usize,
    pub family: String,
    /// Slow-mode value after every sweep.
    #[serde(skip)]
    pub series: Vec<f64>,
    pub tau: f64,
    /// `|Σy - M|` at the end of the run.
    pub drift: f64,
}

/// Exchange dynamics on the box: a random edge's pair is redrawn from its
/// conditional law given the pair sum. One recorded step is a sweep of
/// `|edges|` updates.
pub fn simulate_kawasaki(
    lattice: &LatticeBox,
    p: &PerturbationSpec,
    total: f64,
    c: &ChainConfig,
) -> Result<KawasakiRun> {
    c.validate()?;
    if lattice.sites() < 2 {
        return Err(Error::InvalidInput(
            "a single site has no exchange dynamics".into(),
        ));
    }
    let edges = lattice.edges();
    let w = slow_mode_weights(lattice);
    let sites = lattice.sites();
    let mut y = vec![total / sites as f64; sites];
    let start: f64 = y.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut series = Vec::with_capacity(c.samples);
    let steps = c.burn_in + c.samples * c.thin;
    for t in 0..steps {
        for _ in 0..edges.len() {
            let (i, j) = edges[rng.random_range(0..edges.len())];
            pair_update(p, &mut y, i, j, PairSampler::Rejection, &mut rng)?;
        }
        if t >= c.burn_in && (t - c.burn_in + 1) % c.thin == 0 {
            series.push(w.iter().zip(&y).map(|(a, b)| a * b).sum());
        }
    }
    let tau = stats::geyer_iact(&series) * c.thin as f64;
    let end: f64 = y.iter().sum();
    Ok(KawasakiRun {
        d: lattice.d,
        l: lattice.l,
        family: p.label(),
        series,
        tau,
        drift: (end - start).abs(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxationRow {
    pub d: usize,
    pub l: usize,
    pub family: String,
    pub tau: f64,
    pub tau_err: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxationReport {
    pub rows: Vec<RelaxationRow>,
    /// `log τ ≈ a + z log L`.
    pub fit: LinearFit,
    pub z: f64,
}

/// Independent chains per size.
pub const REPLICAS: usize = 4;

/// Integrated autocorrelation time of the slow mode across sizes and the
/// fitted dynamic exponent `τ ∝ L^z`.
pub fn kawasaki_relaxation(
    d: usize,
    p: &PerturbationSpec,
    total_per_site: f64,
    c: &ChainConfig,
    l_list: &[usize],
) -> Result<RelaxationReport> {
    if !(1..=2).contains(&d) {
        return Err(Error::InvalidInput(format!("relaxation runs support d in {{1, 2}}, got {d}")));
    }
    if let Some(&l) = l_list.iter().find(|&&l| l < 2) {
        return Err(Error::Domain(format!("L = {l} has no exchange dynamics")));
    }
    if l_list.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "the exponent fit needs at least 4 sizes, got {}",
            l_list.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = l_list
        .iter()
        .flat_map(|&l| (0..REPLICAS).map(move |r| (l, r)))
        .collect();
    let runs: Vec<KawasakiRun> = jobs
        .par_iter()
        .map(|&(l, r)| {
            let lattice = LatticeBox::new(d, l)?;
            let total = total_per_site * lattice.sites() as f64;
            let seed = derive_seed(derive_seed(c.seed, l as u64), r as u64);
            simulate_kawasaki(&lattice, p, total, &c.with_seed(seed))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (k, &l) in l_list.iter().enumerate() {
        let taus: Vec<f64> = runs[k * REPLICAS..(k + 1) * REPLICAS].iter().map(|r| r.tau).collect();
        let tau = stats::mean(&taus);
        let tau_err = (stats::variance(&taus) / REPLICAS as f64).sqrt();
        let length = (c.samples * c.thin) as f64;
        if length < MIN_LENGTH_IN_TAU * tau {
            return Err(Error::Unresolved(format!(
                "L = {l}: τ ≈ {tau:.1} sweeps needs at least {:.0} sweeps, chain has {length:.0}",
                MIN_LENGTH_IN_TAU * tau
            )));
        }
        rows.push(RelaxationRow {
            d,
            l,
            family: p.label(),
            tau,
            tau_err,
            replicas: REPLICAS,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.l as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.tau.ln()).collect();
    let ws: Vec<f64> = rows
        .iter()
        .map(|r| {
            let rel = (r.tau_err / r.tau).max(1e-3);
            1.0 / (rel * rel)
        })
        .collect();
    let fit = stats::weighted_linear_fit(&xs, &ys, &ws, true);
    Ok(RelaxationReport { z: fit.slope, rows, fit })
}
