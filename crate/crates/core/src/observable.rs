//! Named test functions with analytic gradients.
//!
//! Site indices run over `0..=n`; index `n` is the last site `M - Σx`. Values
//! are evaluated on the lifted point `y ∈ ℝ^{n+1}`, gradients are returned in
//! the free coordinates of `σ_M`, where `∂_k f = ∂_{y_k} f - ∂_{y_n} f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConservativeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    Coord { i: usize },
    Diff { i: usize, j: usize },
    /// `V'(y_i)`.
    SiteForce { i: usize },
    /// `Σ_i cos(π(i + ½)/(n+1)) y_i`, the lowest Neumann mode of the chain.
    SlowMode,
    Product { i: usize, j: usize },
    ExpCoord { i: usize },
    Const { c: f64 },
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Self::Coord { i } => format!("x{}", i + 1),
            Self::Diff { i, j } => format!("x{}-x{}", i + 1, j + 1),
            Self::SiteForce { i } => format!("dV(x{})", i + 1),
            Self::SlowMode => "slow_mode".into(),
            Self::Product { i, j } => format!("x{}*x{}", i + 1, j + 1),
            Self::ExpCoord { i } => format!("exp(x{})", i + 1),
            Self::Const { c } => format!("const({c})"),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |k: usize| k > n;
        let out = match *self {
            Self::Coord { i } | Self::SiteForce { i } | Self::ExpCoord { i } => bad(i),
            Self::Diff { i, j } | Self::Product { i, j } => bad(i) || bad(j),
            Self::SlowMode | Self::Const { .. } => false,
        };
        if out {
            return Err(Error::InvalidInput(format!(
                "observable {} refers to a site beyond n + 1 = {}",
                self.name(),
                n + 1
            )));
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Const { .. }) || matches!(self, Self::Diff { i, j } if i == j)
    }

    pub fn slow_weight(i: usize, sites: usize) -> f64 {
        (std::f64::consts::PI * (i as f64 + 0.5) / sites as f64).cos()
    }

    /// Value at a lifted point `y` of length `n + 1`.
    pub fn eval_lifted(&self, m: &ConservativeModel, y: &[f64]) -> f64 {
        match *self {
            Self::Coord { i } => y[i],
            Self::Diff { i, j } => y[i] - y[j],
            Self::SiteForce { i } => m.site_force(y[i]),
            Self::SlowMode => y
                .iter()
                .enumerate()
                .map(|(i, v)| Self::slow_weight(i, y.len()) * v)
                .sum(),
            Self::Product { i, j } => y[i] * y[j],
            Self::ExpCoord { i } => y[i].exp(),
            Self::Const { c } => c,
        }
    }

    /// Gradient in `ℝ^{n+1}` (ignoring the constraint).
    pub fn grad_lifted(&self, m: &ConservativeModel, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            Self::Coord { i } => out[i] = 1.0,
            Self::Diff { i, j } => {
                out[i] += 1.0;
                out[j] -= 1.0;
            }
            Self::SiteForce { i } => out[i] = m.site_curvature(y[i]),
            Self::SlowMode => {
                let s = y.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = Self::slow_weight(i, s);
                }
            }
            Self::Product { i, j } => {
                out[i] += y[j];
                out[j] += y[i];
            }
            Self::ExpCoord { i } => out[i] = y[i].exp(),
            Self::Const { .. } => {}
        }
    }

    /// Value at a point `x ∈ ℝⁿ` of `σ_M`.
    pub fn eval(&self, m: &ConservativeModel, x: &[f64]) -> f64 {
        self.eval_lifted(m, &m.lift(x))
    }

    /// Gradient in the free coordinates of `σ_M`.
    pub fn grad(&self, m: &ConservativeModel, x: &[f64], out: &mut [f64]) {
        let y = m.lift(x);
        let mut g = vec![0.0; y.len()];
        self.grad_lifted(m, &y, &mut g);
        let last = g[m.n];
        for (o, gi) in out.iter_mut().zip(&g) {
            *o = gi - last;
        }
    }

    pub fn grad_sq(&self, m: &ConservativeModel, x: &[f64]) -> f64 {
        let mut g = vec![0.0; m.n];
        self.grad(m, x, &mut g);
        g.iter().map(|v| v * v).sum()
    }

    /// Coordinates, the first difference, site forces and the slow mode.
    pub fn poincare_dictionary(n: usize) -> Vec<Self> {
        let mut d: Vec<Self> = (0..=n).map(|i| Self::Coord { i }).collect();
        d.push(Self::Diff { i: 0, j: 1 });
        d.extend((0..=n).map(|i| Self::SiteForce { i }));
        d.push(Self::SlowMode);
        d
    }

    /// Coordinates, pair products, `e^{x₁}`, differences and the slow mode.
    pub fn decomposition_dictionary(n: usize) -> Vec<Self> {
        let mut d: Vec<Self> = (0..n).map(|i| Self::Coord { i }).collect();
        for i in 0..n {
            for j in i..n {
                d.push(Self::Product { i, j });
            }
        }
        d.push(Self::ExpCoord { i: 0 });
        if n >= 2 {
            d.push(Self::Diff { i: 0, j: 1 });
        }
        d.push(Self::SlowMode);
        d
    }
}
