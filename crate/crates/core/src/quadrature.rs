//! Tensor Gauss–Legendre quadrature for `σ_M` in low dimension.
//!
//! The measure is integrated on the box `[c - R, c + R]ⁿ` around the common
//! mean `c = M/(n+1)`. Because `σ_M` is a bounded perturbation of the
//! Gaussian base, the mass outside the box is controlled by the Gaussian tail
//! times `e^{(n+1) osc F}`; see [`SigmaQuadrature::tail_bound`].

use crate::error::{Error, Result};
use crate::model::ConservativeModel;

pub const DEFAULT_HALF_WIDTH: f64 = 10.0;
pub const DEFAULT_NODES: usize = 96;
pub const MAX_DIM: usize = 3;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on `P_q` from the Chebyshev-like initial guesses.
    pub fn new(q: usize) -> Self {
        let mut nodes = vec![0.0; q];
        let mut weights = vec![0.0; q];
        let m = q.div_ceil(2);
        for i in 0..m {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(q, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(q, z);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[q - 1 - i] = z;
            weights[i] = w;
            weights[q - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Nodes and weights mapped affinely to `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        (
            self.nodes.iter().map(|t| mid + half * t).collect(),
            self.weights.iter().map(|w| half * w).collect(),
        )
    }
}

fn legendre(q: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    for k in 2..=q {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if q == 0 {
        return (1.0, 0.0);
    }
    let d = q as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Normalized tensor-product rule for `σ_M` with `n <= 3`.
#[derive(Debug, Clone)]
pub struct SigmaQuadrature {
    pub n: usize,
    /// Physical nodes of one axis (all axes share them).
    pub axis: Vec<f64>,
    /// Probability weight of each tensor node, first coordinate slowest.
    pub weights: Vec<f64>,
    half_width: f64,
    osc_f: f64,
}

impl SigmaQuadrature {
    pub fn new(model: &ConservativeModel, q: usize) -> Result<Self> {
        Self::with_window(model, q, DEFAULT_HALF_WIDTH)
    }

    pub fn with_window(model: &ConservativeModel, q: usize, half_width: f64) -> Result<Self> {
        let n = model.n;
        if n > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "quadrature supports n <= {MAX_DIM}, got {n}"
            )));
        }
        let c = model.site_mean();
        let (axis, aw) = GaussLegendre::new(q).on(c - half_width, c + half_width);
        let len = q.pow(n as u32);
        let mut logw = Vec::with_capacity(len);
        let mut x = vec![0.0; n];
        for idx in 0..len {
            let mut wl = 0.0;
            let mut r = idx;
            for d in (0..n).rev() {
                let k = r % q;
                r /= q;
                x[d] = axis[k];
                wl += aw[k].ln();
            }
            logw.push(wl - model.energy_unchecked(&x));
        }
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        Ok(Self {
            n,
            axis,
            weights,
            half_width,
            osc_f: model.pert.osc_f,
        })
    }

    /// Rule on the smallest window (a multiple of 1/2, at most the default)
    /// whose [`tail_bound`](Self::tail_bound) is below `tail_tol`. Narrower
    /// windows resolve integrands with nearby complex singularities, such as
    /// `log(1 + x²)`, with far fewer nodes.
    pub fn tight(model: &ConservativeModel, q: usize, tail_tol: f64) -> Result<Self> {
        let n = model.n as f64;
        let sd = (n / (n + 1.0)).sqrt();
        let mut r = 4.0;
        while r < DEFAULT_HALF_WIDTH {
            let t = r / sd;
            let gauss = 2.0 * (-0.5 * t * t).exp() / (t * (2.0 * std::f64::consts::PI).sqrt());
            if n * gauss * ((n + 1.0) * model.pert.osc_f).exp() <= tail_tol {
                break;
            }
            r += 0.5;
        }
        Self::with_window(model, q, r.min(DEFAULT_HALF_WIDTH))
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.axis.len()
    }

    /// Coordinates of the tensor node `idx`.
    pub fn point(&self, idx: usize, out: &mut [f64]) {
        let q = self.axis.len();
        let mut r = idx;
        for d in (0..self.n).rev() {
            out[d] = self.axis[r % q];
            r /= q;
        }
    }

    /// Evaluates `f` at every node.
    pub fn tabulate(&self, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        (0..self.weights.len())
            .map(|idx| {
                self.point(idx, &mut x);
                f(&x)
            })
            .collect()
    }

    pub fn expect(&self, f: impl FnMut(&[f64]) -> f64) -> f64 {
        let vals = self.tabulate(f);
        self.expect_values(&vals)
    }

    pub fn expect_values(&self, vals: &[f64]) -> f64 {
        self.weights.iter().zip(vals).map(|(w, v)| w * v).sum()
    }

    /// Upper bound on the σ-mass outside the integration box.
    pub fn tail_bound(&self) -> f64 {
        let n = self.n as f64;
        let sd = (n / (n + 1.0)).sqrt();
        let t = self.half_width / sd;
        // Mills ratio: P(|Z| > t) <= 2 φ(t)/t.
        let gauss = 2.0 * (-0.5 * t * t).exp() / (t * (2.0 * std::f64::consts::PI).sqrt());
        n * gauss * ((n + 1.0) * self.osc_f).exp()
    }
}
