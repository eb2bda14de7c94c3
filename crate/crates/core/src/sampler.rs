//! Markov chain Monte Carlo for `σ_M` and `μ_M`.
//!
//! * Preconditioned Metropolis-adjusted Langevin (MALA) on `ℝⁿ`. The
//!   preconditioner is the covariance `I - 𝟏/(n+1)` of the Gaussian base, so
//!   the Gaussian part is integrated exactly up to the step size and the
//!   acceptance rate depends on the perturbation only.
//! * A conservative pair heat-bath on the hyperplane `Σy = M` of `ℝ^{n+1}`:
//!   pick two sites and redraw them from their conditional law given their sum.
//!
//! The experiments built on these engines (covariance decay and the
//! `β → ∞` penalty limit) live here as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConservativeModel;
use crate::observable::Observable;
use crate::potential::PerturbationSpec;
use crate::quadrature::SigmaQuadrature;
use crate::stats::{self, Estimate, LinearFit};

/// Target acceptance rate for MALA step tuning.
const TARGET_ACCEPT: f64 = 0.574;
const TUNE_WINDOW: usize = 50;
const MAX_STEP: f64 = 3.9;
pub const REJECTION_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    MetropolisLangevin,
    PairHeatBath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub kind: ChainKind,
    /// Initial MALA step; tuned during burn-in. Ignored by the heat-bath.
    pub step: f64,
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            kind: ChainKind::MetropolisLangevin,
            step: 1.0,
            burn_in: 2_000,
            samples: 20_000,
            thin: 1,
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 100 {
            return Err(Error::InvalidInput(format!(
                "chain needs at least 100 samples, got {}",
                self.samples
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidInput("thin must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidInput("step must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Deterministic seed for the `stream`-th independent chain (SplitMix64).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws stored row-major, one row per retained sample.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub dim: usize,
    pub draws: Vec<f64>,
    pub acceptance_rate: f64,
    /// Step size after tuning (MALA only).
    pub step: f64,
    pub seed: u64,
}

impl SampleBatch {
    pub fn samples(&self) -> usize {
        self.draws.len() / self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.draws[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn series(&self, f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        self.rows().map(f).collect()
    }

    pub fn estimate(&self, f: impl FnMut(&[f64]) -> f64) -> Estimate {
        stats::estimate_mean(&self.series(f))
    }

    pub fn mean_estimates(&self) -> Vec<Estimate> {
        (0..self.dim)
            .map(|j| stats::estimate_mean(&self.column(j)))
            .collect()
    }

    /// Per-coordinate integrated autocorrelation times.
    pub fn iact(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|j| stats::geyer_iact(&self.column(j)))
            .collect()
    }

    /// `cov(x_i, x_j)` with the error of the centred product series.
    pub fn covariance_estimate(&self, i: usize, j: usize) -> Estimate {
        let (a, b) = (self.column(i), self.column(j));
        let (ma, mb) = (stats::mean(&a), stats::mean(&b));
        let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).collect();
        stats::estimate_mean(&prod)
    }

    /// Drops the last coordinate (a `μ_M` batch becomes a `σ_M` batch).
    pub fn drop_last(&self) -> Self {
        let dim = self.dim - 1;
        let draws = self.rows().flat_map(|r| r[..dim].iter().copied()).collect();
        Self {
            dim,
            draws,
            ..self.clone()
        }
    }

    /// Appends the last site `M - Σx` to every row.
    pub fn lifted(&self, m: &ConservativeModel) -> Self {
        let draws = self.rows().flat_map(|r| m.lift(r)).collect();
        Self {
            dim: self.dim + 1,
            draws,
            ..self.clone()
        }
    }

    /// Raw little-endian `f64` dump of the draw matrix.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.draws.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(dim: usize, bytes: &[u8]) -> Result<Self> {
        if dim == 0 || bytes.len() % (8 * dim) != 0 {
            return Err(Error::InvalidInput(format!(
                "{} bytes is not a whole number of rows of dimension {dim}",
                bytes.len()
            )));
        }
        let draws = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            dim,
            draws,
            acceptance_rate: f64::NAN,
            step: f64::NAN,
            seed: 0,
        })
    }
}

/// Preconditioner `C = I - aJ` on `ℝ^dim` with `C⁻¹ = I + bJ` and
/// `C^{1/2} = I - cJ` (`J` the all-ones matrix).
#[derive(Debug, Clone, Copy)]
struct Precond {
    a: f64,
    b: f64,
    c: f64,
}

impl Precond {
    fn new(dim: usize, a: f64) -> Self {
        let d = dim as f64;
        let r = 1.0 - a * d;
        Self {
            a,
            b: a / r,
            c: (1.0 - r.sqrt()) / d,
        }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let s: f64 = v.iter().sum();
        for (o, x) in out.iter_mut().zip(v) {
            *o = x - self.a * s;
        }
    }

    fn apply_sqrt(&self, v: &[f64], out: &mut [f64]) {
        let s: f64 = v.iter().sum();
        for (o, x) in out.iter_mut().zip(v) {
            *o = x - self.c * s;
        }
    }

    fn inv_form(&self, d: &[f64]) -> f64 {
        let s: f64 = d.iter().sum();
        d.iter().map(|v| v * v).sum::<f64>() + self.b * s * s
    }
}

/// Preconditioned MALA for the energy `u`, which writes the gradient into its
/// second argument and returns the energy.
fn mala<U>(x0: Vec<f64>, u: U, pre: Precond, c: &ChainConfig) -> Result<SampleBatch>
where
    U: Fn(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut x = x0;
    let mut g = vec![0.0; dim];
    let mut e = u(&x, &mut g);
    if !e.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut cg = vec![0.0; dim];
    pre.apply(&g, &mut cg);
    let (mut y, mut gy, mut cgy) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let (mut xi, mut noise, mut d) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut h = c.step.min(MAX_STEP);
    let mut window_acc = 0usize;
    let mut window_idx = 0usize;
    let total = c.burn_in + c.samples * c.thin;
    let mut accepted = 0usize;
    let mut draws = Vec::with_capacity(c.samples * dim);
    for t in 0..total {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        pre.apply_sqrt(&xi, &mut noise);
        let sh = h.sqrt();
        for k in 0..dim {
            y[k] = x[k] - 0.5 * h * cg[k] + sh * noise[k];
        }
        let ey = u(&y, &mut gy);
        if !ey.is_finite() {
            return Err(Error::Diverged { step: t });
        }
        pre.apply(&gy, &mut cgy);
        for k in 0..dim {
            d[k] = y[k] - x[k] + 0.5 * h * cg[k];
        }
        let fwd = pre.inv_form(&d);
        for k in 0..dim {
            d[k] = x[k] - y[k] + 0.5 * h * cgy[k];
        }
        let bwd = pre.inv_form(&d);
        let log_alpha = e - ey + (fwd - bwd) / (2.0 * h);
        let accept = log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha;
        if accept {
            std::mem::swap(&mut x, &mut y);
            std::mem::swap(&mut g, &mut gy);
            std::mem::swap(&mut cg, &mut cgy);
            e = ey;
        }
        if t < c.burn_in {
            window_acc += accept as usize;
            if (t + 1) % TUNE_WINDOW == 0 {
                window_idx += 1;
                let rate = window_acc as f64 / TUNE_WINDOW as f64;
                let gain = 1.0 / (window_idx as f64).sqrt();
                h = (h * ((rate - TARGET_ACCEPT) * 2.0 * gain).exp()).clamp(1e-8, MAX_STEP);
                window_acc = 0;
            }
        } else {
            accepted += accept as usize;
            if (t - c.burn_in + 1) % c.thin == 0 {
                draws.extend_from_slice(&x);
            }
        }
    }
    let rate = accepted as f64 / (c.samples * c.thin) as f64;
    if !(0.2..=0.9).contains(&rate) {
        return Err(Error::AutoTune { rate });
    }
    Ok(SampleBatch {
        dim,
        draws,
        acceptance_rate: rate,
        step: h,
        seed: c.seed,
    })
}

/// Samples `σ_M` on `ℝⁿ`. A heat-bath config runs [`sample_mu_exchange`] and
/// drops the last site.
pub fn sample_sigma(m: &ConservativeModel, c: &ChainConfig) -> Result<SampleBatch> {
    c.validate()?;
    match c.kind {
        ChainKind::MetropolisLangevin => {
            let n = m.n;
            let x0 = vec![m.site_mean(); n];
            let pre = Precond::new(n, 1.0 / (n as f64 + 1.0));
            mala(
                x0,
                |x, g| {
                    m.grad_into(x, g);
                    m.energy_unchecked(x)
                },
                pre,
                c,
            )
        }
        ChainKind::PairHeatBath => Ok(sample_mu_exchange(m, c)?.drop_last()),
    }
}

/// Sampler for the pair conditional `∝ exp(-V(u) - V(s - u))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairSampler {
    /// Gaussian `N(s/2, 1/2)` proposal with acceptance `e^{-F(u)-F(s-u)-2‖F‖∞}`.
    #[default]
    Rejection,
    /// Inverse CDF on a `2¹²`-node grid over `s/2 ± 8` standard deviations.
    Grid,
}

pub const PAIR_GRID_NODES: usize = 1 << 12;
const PAIR_SD: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// One draw from the pair conditional given the pair sum `s`.
pub fn sample_pair_conditional(
    pert: &PerturbationSpec,
    s: f64,
    how: PairSampler,
    rng: &mut impl Rng,
) -> Result<f64> {
    match how {
        PairSampler::Rejection => {
            if pert.is_zero() {
                let z: f64 = StandardNormal.sample(rng);
                return Ok(0.5 * s + PAIR_SD * z);
            }
            for _ in 0..REJECTION_CAP {
                let z: f64 = StandardNormal.sample(rng);
                let u = 0.5 * s + PAIR_SD * z;
                let log_acc = -(pert.f(u) + pert.f(s - u)) - 2.0 * pert.sup_f;
                if rng.random::<f64>().ln() < log_acc {
                    return Ok(u);
                }
            }
            Err(Error::RejectionCap {
                tries: REJECTION_CAP,
            })
        }
        PairSampler::Grid => Ok(PairGrid::new(pert, s).draw(rng.random::<f64>())),
    }
}

/// Tabulated CDF of the pair conditional (piecewise-linear density).
#[derive(Debug, Clone)]
pub struct PairGrid {
    lo: f64,
    h: f64,
    dens: Vec<f64>,
    cdf: Vec<f64>,
}

impl PairGrid {
    pub fn new(pert: &PerturbationSpec, s: f64) -> Self {
        let half = 8.0 * PAIR_SD;
        let lo = 0.5 * s - half;
        let h = 2.0 * half / (PAIR_GRID_NODES - 1) as f64;
        let dens: Vec<f64> = (0..PAIR_GRID_NODES)
            .map(|k| {
                let u = lo + k as f64 * h;
                let z = u - 0.5 * s;
                (-z * z - pert.f(u) - pert.f(s - u)).exp()
            })
            .collect();
        let mut cdf = vec![0.0; PAIR_GRID_NODES];
        for k in 1..PAIR_GRID_NODES {
            cdf[k] = cdf[k - 1] + 0.5 * h * (dens[k - 1] + dens[k]);
        }
        let z = cdf[PAIR_GRID_NODES - 1];
        cdf.iter_mut().for_each(|c| *c /= z);
        let dens = dens.into_iter().map(|d| d / z).collect();
        Self { lo, h, dens, cdf }
    }

    /// Inverse CDF at `p ∈ [0, 1)`; exact for the piecewise-linear density.
    pub fn draw(&self, p: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c <= p).clamp(1, self.cdf.len() - 1) - 1;
        let (d0, d1) = (self.dens[k], self.dens[k + 1]);
        let r = p - self.cdf[k];
        // Solve d0 t + (d1 - d0) t²/(2h) = r for t ∈ [0, h].
        let slope = (d1 - d0) / self.h;
        let t = if slope.abs() < 1e-14 * d0.max(1e-300) {
            r / d0
        } else {
            let disc = (d0 * d0 + 2.0 * slope * r).max(0.0);
            2.0 * r / (d0 + disc.sqrt())
        };
        self.lo + k as f64 * self.h + t.clamp(0.0, self.h)
    }
}

/// Error-free sum `a + b = s + e` (Knuth's TwoSum).
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Redraws `(y_i, y_j)` given `y_i + y_j`, keeping the pair sum to the last bit.
pub fn pair_update(
    pert: &PerturbationSpec,
    y: &mut [f64],
    i: usize,
    j: usize,
    how: PairSampler,
    rng: &mut impl Rng,
) -> Result<()> {
    let s = y[i] + y[j];
    // Keep the rounding residue of the old pair so it is not lost.
    let (_, lost) = two_sum(y[i], y[j]);
    let u = sample_pair_conditional(pert, s, how, rng)?;
    let mut v = s - u;
    let (p, e) = two_sum(u, v);
    v += (s - p) - e + lost;
    y[i] = u;
    y[j] = v;
    Ok(())
}

/// Pair heat-bath for `μ_M` on `ℝ^{n+1}` with any pair chosen uniformly. One
/// recorded step is a sweep of `n + 1` pair updates.
pub fn sample_mu_exchange(m: &ConservativeModel, c: &ChainConfig) -> Result<SampleBatch> {
    sample_mu_exchange_with(m, c, PairSampler::default())
}

pub fn sample_mu_exchange_with(
    m: &ConservativeModel,
    c: &ChainConfig,
    how: PairSampler,
) -> Result<SampleBatch> {
    c.validate()?;
    if c.kind == ChainKind::MetropolisLangevin {
        return Ok(sample_sigma(m, c)?.lifted(m));
    }
    let sites = m.sites();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut y = vec![m.site_mean(); sites];
    y[sites - 1] = m.last(&y[..sites - 1]);
    let total = c.burn_in + c.samples * c.thin;
    let mut draws = Vec::with_capacity(c.samples * sites);
    for t in 0..total {
        for _ in 0..sites {
            let i = rng.random_range(0..sites);
            let mut j = rng.random_range(0..sites - 1);
            if j >= i {
                j += 1;
            }
            pair_update(&m.pert, &mut y, i, j, how, &mut rng)?;
        }
        if t >= c.burn_in && (t - c.burn_in + 1) % c.thin == 0 {
            draws.extend_from_slice(&y);
        }
    }
    Ok(SampleBatch {
        dim: sites,
        draws,
        acceptance_rate: 1.0,
        step: f64::NAN,
        seed: c.seed,
    })
}

/// Exact transition matrix of the pair heat-bath on the discrete toy with three
/// sites taking values `lo + k·h` (`k ∈ 0..levels`) and `k₁ + k₂ + k₃ = total`.
/// Returns the states, the normalized invariant weights and the kernel.
pub fn pair_heat_bath_kernel(
    pert: &PerturbationSpec,
    lo: f64,
    h: f64,
    levels: usize,
    total: usize,
) -> (Vec<[usize; 3]>, Vec<f64>, nalgebra::DMatrix<f64>) {
    let v = |k: usize| {
        let u = lo + k as f64 * h;
        0.5 * u * u + pert.f(u)
    };
    let mut states = Vec::new();
    for a in 0..levels {
        for b in 0..levels {
            if a + b <= total && total - a - b < levels {
                states.push([a, b, total - a - b]);
            }
        }
    }
    let index = |s: &[usize; 3]| states.iter().position(|t| t == s);
    let mut pi: Vec<f64> = states
        .iter()
        .map(|s| (-(v(s[0]) + v(s[1]) + v(s[2]))).exp())
        .collect();
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= z);
    let ns = states.len();
    let mut t = nalgebra::DMatrix::zeros(ns, ns);
    let pairs = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
    for (from, s) in states.iter().enumerate() {
        for &(i, j) in &pairs {
            let sum = s[i] + s[j];
            let options: Vec<usize> = (0..=sum).filter(|&a| a < levels && sum - a < levels).collect();
            let w: Vec<f64> = options.iter().map(|&a| (-(v(a) + v(sum - a))).exp()).collect();
            let wz: f64 = w.iter().sum();
            for (&a, wa) in options.iter().zip(&w) {
                let mut next = *s;
                next[i] = a;
                next[j] = sum - a;
                let to = index(&next).expect("constraint preserved");
                t[(from, to)] += wa / wz / pairs.len() as f64;
            }
        }
    }
    (states, pi, t)
}

/// Pooled covariance `cov(V'(y_a), V'(y_b))` over all pairs `a ≠ b` of the
/// `n + 1` sites, from a batch whose rows are lifted points. Each sample
/// contributes `((Σd)² - Σd²)/(m(m-1))` with `d` the centred forces, so the
/// error bar accounts for correlation between pairs and along the chain.
pub fn pooled_force_covariance(m: &ConservativeModel, lifted: &SampleBatch) -> Estimate {
    let sites = lifted.dim as f64;
    let mu = lifted
        .rows()
        .map(|r| r.iter().map(|&u| m.site_force(u)).sum::<f64>())
        .sum::<f64>()
        / (lifted.samples() as f64 * sites);
    let q = lifted.series(|r| {
        let (mut s1, mut s2) = (0.0, 0.0);
        for &u in r {
            let d = m.site_force(u) - mu;
            s1 += d;
            s2 += d * d;
        }
        (s1 * s1 - s2) / (sites * (sites - 1.0))
    });
    stats::estimate_mean(&q)
}

/// `Var(Σ F'(y_a))` over the `n + 1` sites of a lifted batch.
pub fn force_sum_variance(m: &ConservativeModel, lifted: &SampleBatch) -> Estimate {
    let s = lifted.series(|r| r.iter().map(|&u| m.pert.df(u)).sum());
    let mean = stats::mean(&s);
    let sq: Vec<f64> = s.iter().map(|v| (v - mean) * (v - mean)).collect();
    stats::estimate_mean(&sq)
}

/// How the total spin is chosen for each `n` in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MRule {
    Zero,
    /// `M = n + 1`, so every site has mean one.
    MeanOne,
    Fixed(f64),
}

impl MRule {
    pub fn total(&self, n: usize) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::MeanOne => (n + 1) as f64,
            Self::Fixed(m) => m,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CovDecayRow {
    pub n: usize,
    pub total: f64,
    pub cov: Estimate,
    /// `Var(Σ F'(y_a))/n`.
    pub force_var_per_site: Estimate,
    pub acceptance_rate: f64,
    pub inconclusive: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovDecayReport {
    pub rows: Vec<CovDecayRow>,
    /// Fit of `log|cov|` against `log n`, weighted by the inverse variance of `log|cov|`.
    pub fit: LinearFit,
}

pub fn covariance_decay_experiment(
    p: &PerturbationSpec,
    n_list: &[usize],
    m_rule: MRule,
    c: &ChainConfig,
) -> Result<CovDecayReport> {
    if n_list.len() < 4 || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] < 1 {
        return Err(Error::InvalidInput(
            "n_list must hold at least 4 ascending positive entries".into(),
        ));
    }
    let rows: Vec<CovDecayRow> = n_list
        .par_iter()
        .map(|&n| {
            let m = ConservativeModel::new(n, m_rule.total(n), p.clone())?;
            let batch = sample_sigma(&m, &c.with_seed(derive_seed(c.seed, n as u64)))?;
            let lifted = batch.lifted(&m);
            let cov = pooled_force_covariance(&m, &lifted);
            let fv = force_sum_variance(&m, &lifted);
            Ok(CovDecayRow {
                n,
                total: m.total,
                cov,
                force_var_per_site: Estimate {
                    value: fv.value / n as f64,
                    err: fv.err / n as f64,
                    iact: fv.iact,
                },
                acceptance_rate: batch.acceptance_rate,
                inconclusive: cov.err > cov.value.abs(),
            })
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.cov.value.abs().ln()).collect();
    let ws: Vec<f64> = rows
        .iter()
        .map(|r| {
            let rel = (r.cov.err / r.cov.value.abs()).max(1e-12);
            1.0 / (rel * rel)
        })
        .collect();
    let fit = stats::weighted_linear_fit(&xs, &ys, &ws, false);
    Ok(CovDecayReport { rows, fit })
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaLimitRow {
    pub beta: f64,
    pub value: Estimate,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaLimitReport {
    pub observable: String,
    pub rows: Vec<BetaLimitRow>,
    /// `⟨f⟩_{σ_M}`: quadrature for `n ≤ 3`, otherwise MALA.
    pub reference: Estimate,
    /// `|gap|` never grows by more than two combined error bars from one `β` to the next.
    pub decreasing: bool,
    /// The last gap lies within three combined error bars.
    pub final_within: bool,
}

/// Samples `∝ exp(-Σ V(y_a) - β(M - Σy)²)` on `ℝ^{n+1}` with MALA
/// preconditioned by the inverse of `I + 2β𝟏`.
pub fn sample_penalized(m: &ConservativeModel, beta: f64, c: &ChainConfig) -> Result<SampleBatch> {
    c.validate()?;
    if !(beta > 0.0) {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    let sites = m.sites();
    let nn = sites as f64;
    let pre = Precond::new(sites, 2.0 * beta / (1.0 + 2.0 * beta * nn));
    let x0 = vec![m.site_mean(); sites];
    mala(
        x0,
        |y, g| {
            let r = m.total - y.iter().sum::<f64>();
            let mut e = beta * r * r;
            for (gi, &u) in g.iter_mut().zip(y) {
                *gi = m.site_force(u) - 2.0 * beta * r;
                e += m.site_potential(u);
            }
            e
        },
        pre,
        c,
    )
}

pub fn beta_limit_check(
    m: &ConservativeModel,
    f: &Observable,
    beta_list: &[f64],
    c: &ChainConfig,
) -> Result<BetaLimitReport> {
    f.validate(m.n)?;
    if beta_list.is_empty() || beta_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("beta_list must be ascending and non-empty".into()));
    }
    let reference = if m.n <= crate::quadrature::MAX_DIM {
        let q = SigmaQuadrature::new(m, 64)?;
        Estimate::exact(q.expect(|x| f.eval(m, x)))
    } else {
        let batch = sample_sigma(m, &c.with_seed(derive_seed(c.seed, u64::MAX)))?;
        batch.estimate(|x| f.eval(m, x))
    };
    let rows: Vec<BetaLimitRow> = beta_list
        .par_iter()
        .enumerate()
        .map(|(k, &beta)| {
            let batch = sample_penalized(m, beta, &c.with_seed(derive_seed(c.seed, k as u64)))?;
            let value = batch.estimate(|y| f.eval_lifted(m, y));
            Ok(BetaLimitRow {
                beta,
                value,
                gap: value.value - reference.value,
            })
        })
        .collect::<Result<_>>()?;
    let comb = |r: &BetaLimitRow| (r.value.err.powi(2) + reference.err.powi(2)).sqrt();
    let decreasing = rows
        .windows(2)
        .all(|w| w[1].gap.abs() <= w[0].gap.abs() + 2.0 * (comb(&w[0]).powi(2) + comb(&w[1]).powi(2)).sqrt());
    let last = rows.last().expect("non-empty");
    let final_within = last.gap.abs() <= 3.0 * comb(last) + 1e-12;
    Ok(BetaLimitReport {
        observable: f.name(),
        rows,
        reference,
        decreasing,
        final_within,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(samples: usize, seed: u64) -> ChainConfig {
        ChainConfig {
            samples,
            seed,
            ..ChainConfig::default()
        }
    }

    #[test]
    fn gaussian_moments_from_mala() {
        let m = ConservativeModel::new(2, 3.0, PerturbationSpec::zero()).unwrap();
        let b = sample_sigma(&m, &cfg(40_000, 1)).unwrap();
        assert!((0.2..=0.9).contains(&b.acceptance_rate));
        for e in b.mean_estimates() {
            assert!(e.within(1.0, 4.0), "{e:?}");
        }
        let c = b.covariance_estimate(0, 1);
        assert!(c.within(-1.0 / 3.0, 4.0), "{c:?}");
        let v = b.covariance_estimate(0, 0);
        assert!(v.within(2.0 / 3.0, 4.0), "{v:?}");
    }

    #[test]
    fn reproducible_bit_for_bit() {
        let m = ConservativeModel::new(3, 0.5, PerturbationSpec::sine(0.2)).unwrap();
        let a = sample_sigma(&m, &cfg(500, 9)).unwrap();
        let b = sample_sigma(&m, &cfg(500, 9)).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let c = sample_sigma(&m, &cfg(500, 10)).unwrap();
        assert_ne!(a.to_le_bytes(), c.to_le_bytes());
        let back = SampleBatch::from_le_bytes(3, &a.to_le_bytes()).unwrap();
        assert_eq!(back.draws, a.draws);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(99, 0).validate().is_err());
        let mut c = cfg(100, 0);
        c.thin = 0;
        assert!(c.validate().is_err());
        let parsed: ChainConfig = serde_json::from_str(
            r#"{"kind":"pair_heat_bath","step":0.5,"burn_in":10,"samples":100,"thin":1,"seed":3}"#,
        )
        .unwrap();
        assert_eq!(parsed.kind, ChainKind::PairHeatBath);
    }

    #[test]
    fn heat_bath_conserves_total() {
        let m = ConservativeModel::new(7, 2.5, PerturbationSpec::sine(0.3)).unwrap();
        let c = ChainConfig {
            kind: ChainKind::PairHeatBath,
            burn_in: 0,
            ..cfg(2_000, 4)
        };
        let b = sample_mu_exchange(&m, &c).unwrap();
        for r in b.rows() {
            assert!((r.iter().sum::<f64>() - 2.5).abs() <= 1e-10);
        }
    }

    #[test]
    fn pair_update_drift_over_a_million_updates() {
        let p = PerturbationSpec::sine(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut y = vec![0.3, -1.7, 2.9, 0.123456789];
        let total: f64 = y.iter().sum();
        for _ in 0..1_000_000 {
            let i = rng.random_range(0..4);
            let j = (i + 1 + rng.random_range(0..3)) % 4;
            pair_update(&p, &mut y, i, j, PairSampler::Rejection, &mut rng).unwrap();
        }
        assert!((y.iter().sum::<f64>() - total).abs() <= 1e-10);
    }

    #[test]
    fn heat_bath_kernel_is_reversible() {
        let p = PerturbationSpec::sine(0.4);
        let (states, pi, t) = pair_heat_bath_kernel(&p, -2.0, 0.25, 14, 20);
        assert!(states.len() > 50);
        for a in 0..states.len() {
            assert_abs_diff_eq!(t.row(a).sum(), 1.0, epsilon = 1e-12);
            for b in 0..states.len() {
                assert!((pi[a] * t[(a, b)] - pi[b] * t[(b, a)]).abs() <= 1e-10);
            }
        }
        let stationary = t.transpose() * nalgebra::DVector::from_vec(pi.clone());
        for (s, p) in stationary.iter().zip(&pi) {
            assert_abs_diff_eq!(s, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn pair_samplers_match_quadrature_moments() {
        let p = PerturbationSpec::sine(0.3);
        let s = 0.8;
        // Moments of ∝ exp(-V(u) - V(s-u)) by fine trapezoid rule.
        let (lo, hi, k) = (s / 2.0 - 7.0, s / 2.0 + 7.0, 20_000);
        let h = (hi - lo) / k as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=k {
            let u = lo + i as f64 * h;
            let w = (-(0.5 * u * u + p.f(u)) - (0.5 * (s - u) * (s - u) + p.f(s - u))).exp();
            z += w;
            m1 += w * u;
            m2 += w * u * u;
        }
        let (mean, var) = (m1 / z, m2 / z - (m1 / z).powi(2));
        for how in [PairSampler::Rejection, PairSampler::Grid] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let draws: Vec<f64> = (0..200_000)
                .map(|_| sample_pair_conditional(&p, s, how, &mut rng).unwrap())
                .collect();
            let em = stats::mean(&draws);
            let ev = stats::variance(&draws);
            let se = (var / draws.len() as f64).sqrt();
            assert!((em - mean).abs() < 4.0 * se, "{how:?} mean {em} vs {mean}");
            assert!((ev - var).abs() < 0.02 * var, "{how:?} var {ev} vs {var}");
        }
    }

    #[test]
    fn grid_inverse_cdf_is_monotone_and_inside_window() {
        let g = PairGrid::new(&PerturbationSpec::sine(0.2), 1.0);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..1000 {
            let u = g.draw(k as f64 / 1000.0);
            assert!(u >= prev);
            prev = u;
        }
        assert!(prev <= 0.5 + 8.0 * PAIR_SD + 1e-12);
    }

    #[test]
    fn penalized_gaussian_mean_matches_closed_form() {
        // F ≡ 0: ⟨y₁⟩_β = 2βM/(1 + 2β(n+1)).
        let m = ConservativeModel::new(2, 3.0, PerturbationSpec::zero()).unwrap();
        for beta in [0.5, 4.0] {
            let b = sample_penalized(&m, beta, &cfg(40_000, 2)).unwrap();
            let exact = 2.0 * beta * 3.0 / (1.0 + 2.0 * beta * 3.0);
            let e = b.estimate(|y| y[0]);
            assert!(e.within(exact, 4.0), "beta {beta}: {e:?} vs {exact}");
        }
    }

    #[test]
    fn pooled_covariance_gaussian_is_exact_per_sample() {
        let m = ConservativeModel::new(5, 0.0, PerturbationSpec::zero()).unwrap();
        let b = sample_sigma(&m, &cfg(20_000, 3)).unwrap().lifted(&m);
        let c = pooled_force_covariance(&m, &b);
        assert!(c.within(-1.0 / 6.0, 4.0), "{c:?}");
        assert_abs_diff_eq!(force_sum_variance(&m, &b).value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|k| derive_seed(42, k)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
    }
}
