//! Single-site potential `V(u) = u²/2 + F(u)` and the bounded perturbation
//! families `F` used throughout the crate.
//!
//! Every family carries analytic bounds on `|F|`, `|F'|`, `|F''|` and on the
//! oscillation `sup F - inf F`. Downstream constants are computed from these
//! bounds, so they are supplied by the constructors and only *validated* by
//! grid scans, never estimated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named perturbation family, as written in experiment configs.
///
/// ```json
/// {"kind":"zero"} | {"kind":"sine","eps":0.1} | {"kind":"poly_sine","p":[0,0.1],"q":[0,1]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    Zero,
    Sine { eps: f64 },
    /// `F(u) = P(sin(Q(u)))`; coefficients are in ascending degree order.
    /// `Q` must be affine, otherwise `F'` is unbounded.
    PolySine { p: Vec<f64>, q: Vec<f64> },
}

/// A bounded perturbation `F` together with certified sup-norm bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationSpec {
    family: Family,
    pub sup_f: f64,
    pub sup_df: f64,
    pub sup_d2f: f64,
    pub osc_f: f64,
}

impl PerturbationSpec {
    pub fn zero() -> Self {
        Self {
            family: Family::Zero,
            sup_f: 0.0,
            sup_df: 0.0,
            sup_d2f: 0.0,
            osc_f: 0.0,
        }
    }

    /// `F(u) = eps·sin(u)`.
    pub fn sine(eps: f64) -> Self {
        let a = eps.abs();
        Self {
            family: Family::Sine { eps },
            sup_f: a,
            sup_df: a,
            sup_d2f: a,
            osc_f: 2.0 * a,
        }
    }

    /// `F(u) = P(sin(Q(u)))` with `Q` affine.
    pub fn poly_sine(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.iter().chain(q.iter()).any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("poly_sine coefficients must be finite".into()));
        }
        let q_deg = q.iter().rposition(|c| *c != 0.0).unwrap_or(0);
        if q_deg > 1 {
            return Err(Error::InvalidInput(
                "poly_sine requires deg Q <= 1 (F' is unbounded otherwise)".into(),
            ));
        }
        let slope = q.get(1).copied().unwrap_or(0.0).abs();
        // |sin| <= 1, so sum_k |p_k| bounds |P| on [-1, 1]; similarly for P', P''.
        let sup_p: f64 = p.iter().map(|c| c.abs()).sum();
        let sup_dp: f64 = p
            .iter()
            .enumerate()
            .map(|(k, c)| k as f64 * c.abs())
            .sum();
        let sup_d2p: f64 = p
            .iter()
            .enumerate()
            .map(|(k, c)| (k * k.saturating_sub(1)) as f64 * c.abs())
            .sum();
        // The constant term does not move F, so it does not enter the oscillation.
        let osc = 2.0 * p.iter().skip(1).map(|c| c.abs()).sum::<f64>();
        Ok(Self {
            family: Family::PolySine { p, q },
            sup_f: sup_p,
            sup_df: sup_dp * slope,
            sup_d2f: (sup_d2p + sup_dp) * slope * slope,
            osc_f: osc.min(2.0 * sup_p),
        })
    }

    pub fn from_family(family: &Family) -> Result<Self> {
        match family {
            Family::Zero => Ok(Self::zero()),
            Family::Sine { eps } => {
                if !eps.is_finite() {
                    return Err(Error::InvalidInput("sine eps must be finite".into()));
                }
                Ok(Self::sine(*eps))
            }
            Family::PolySine { p, q } => Self::poly_sine(p.clone(), q.clone()),
        }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn is_zero(&self) -> bool {
        match &self.family {
            Family::Zero => true,
            Family::Sine { eps } => *eps == 0.0,
            Family::PolySine { p, .. } => p.iter().all(|c| *c == 0.0),
        }
    }

    /// Short label for CSV rows, e.g. `sine(0.1)`.
    pub fn label(&self) -> String {
        match &self.family {
            Family::Zero => "zero".to_string(),
            Family::Sine { eps } => format!("sine({eps})"),
            Family::PolySine { p, q } => format!("poly_sine({p:?};{q:?})"),
        }
    }

    #[inline]
    pub fn f(&self, u: f64) -> f64 {
        match &self.family {
            Family::Zero => 0.0,
            Family::Sine { eps } => eps * u.sin(),
            Family::PolySine { p, q } => horner(p, horner(q, u).sin()),
        }
    }

    #[inline]
    pub fn df(&self, u: f64) -> f64 {
        match &self.family {
            Family::Zero => 0.0,
            Family::Sine { eps } => eps * u.cos(),
            Family::PolySine { p, q } => {
                let (z, dz) = (horner(q, u), q.get(1).copied().unwrap_or(0.0));
                horner_deriv(p, z.sin()) * z.cos() * dz
            }
        }
    }

    #[inline]
    pub fn d2f(&self, u: f64) -> f64 {
        match &self.family {
            Family::Zero => 0.0,
            Family::Sine { eps } => -eps * u.sin(),
            Family::PolySine { p, q } => {
                let (z, dz) = (horner(q, u), q.get(1).copied().unwrap_or(0.0));
                let s = z.sin();
                let c = z.cos();
                (horner_deriv2(p, s) * c * c - horner_deriv(p, s) * s) * dz * dz
            }
        }
    }

    /// Scans `[lo, hi]` at spacing `step` and reports the first point where a
    /// certified bound is violated.
    pub fn validate_bounds(&self, lo: f64, hi: f64, step: f64) -> Result<()> {
        let slack = 1e-12;
        let count = ((hi - lo) / step).ceil() as usize;
        let (mut fmin, mut fmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=count {
            let u = (lo + k as f64 * step).min(hi);
            let (f, df, d2f) = (self.f(u), self.df(u), self.d2f(u));
            fmin = fmin.min(f);
            fmax = fmax.max(f);
            if f.abs() > self.sup_f + slack
                || df.abs() > self.sup_df + slack
                || d2f.abs() > self.sup_d2f + slack
            {
                return Err(Error::BoundViolation { at: u });
            }
        }
        if fmax - fmin > self.osc_f + slack || self.osc_f > 2.0 * self.sup_f + slack {
            return Err(Error::BoundViolation { at: f64::NAN });
        }
        Ok(())
    }
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn horner_deriv(c: &[f64], x: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, &a)| acc * x + k as f64 * a)
}

fn horner_deriv2(c: &[f64], x: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(2)
        .rev()
        .fold(0.0, |acc, (k, &a)| acc * x + (k * (k - 1)) as f64 * a)
}

/// `(V, V', V'')` at `u` for `V(u) = u²/2 + F(u)`.
#[inline]
pub fn eval_site_potential(p: &PerturbationSpec, u: f64) -> (f64, f64, f64) {
    (0.5 * u * u + p.f(u), u + p.df(u), 1.0 + p.d2f(u))
}

/// Smooth convex base `Φ` with `alpha <= Φ'' <= beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexBase {
    /// `Φ(u) = c·u²/2`.
    Quadratic { curvature: f64 },
    /// `Φ(u) = c·u²/2 - a·cos(u)`, curvature in `[c - a, c + a]`.
    QuadraticCos { curvature: f64, amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexBaseSpec {
    pub phi: ConvexBase,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ConvexBaseSpec {
    fn default() -> Self {
        Self {
            phi: ConvexBase::Quadratic { curvature: 1.0 },
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl ConvexBaseSpec {
    pub fn quadratic(curvature: f64) -> Result<Self> {
        Self::new(ConvexBase::Quadratic { curvature }, curvature, curvature)
    }

    pub fn quadratic_cos(curvature: f64, amplitude: f64) -> Result<Self> {
        let a = amplitude.abs();
        Self::new(
            ConvexBase::QuadraticCos { curvature, amplitude },
            curvature - a,
            curvature + a,
        )
    }

    /// Explicit curvature bounds, which may be looser than the tight ones.
    pub fn new(phi: ConvexBase, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= beta && beta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "convex base needs 0 < alpha <= beta, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self { phi, alpha, beta })
    }

    pub fn phi(&self, u: f64) -> f64 {
        match self.phi {
            ConvexBase::Quadratic { curvature } => 0.5 * curvature * u * u,
            ConvexBase::QuadraticCos { curvature, amplitude } => {
                0.5 * curvature * u * u - amplitude * u.cos()
            }
        }
    }

    pub fn phi_second(&self, u: f64) -> f64 {
        match self.phi {
            ConvexBase::Quadratic { curvature } => curvature,
            ConvexBase::QuadraticCos { curvature, amplitude } => curvature + amplitude * u.cos(),
        }
    }
}

/// Poincaré constant `e^{2 osc}/(2 e^{-2 osc} - 1)` for `V = u²/2 + F`,
/// valid for `osc F < log √2`.
pub fn perturbative_poincare_constant(osc_f: f64) -> Result<f64> {
    generalized_perturbative_constant(osc_f, &ConvexBaseSpec::default())
}

/// `e^{2 osc}/(2α e^{-2 osc} - β)`, valid for `osc F < log √(2α/β)`.
pub fn generalized_perturbative_constant(osc_f: f64, base: &ConvexBaseSpec) -> Result<f64> {
    let threshold = 0.5 * (2.0 * base.alpha / base.beta).ln();
    if !(osc_f >= 0.0) || osc_f >= threshold {
        return Err(Error::Domain(format!(
            "osc F = {osc_f} outside [0, log sqrt(2 alpha/beta) = {threshold})"
        )));
    }
    let denom = 2.0 * base.alpha * (-2.0 * osc_f).exp() - base.beta;
    if denom <= 0.0 {
        return Err(Error::Domain(format!("non-positive denominator {denom}")));
    }
    Ok((2.0 * osc_f).exp() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn site_potential_examples() {
        let zero = PerturbationSpec::zero();
        assert_eq!(eval_site_potential(&zero, 2.0), (2.0, 2.0, 1.0));

        let sin = PerturbationSpec::sine(1.0);
        let (v, dv, d2v) = eval_site_potential(&sin, 0.0);
        assert_abs_diff_eq!(v, 0.0);
        assert_abs_diff_eq!(dv, 1.0);
        assert_abs_diff_eq!(d2v, 1.0);

        let (v, dv, d2v) = eval_site_potential(&sin, PI);
        assert_abs_diff_eq!(v, PI * PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dv, PI - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d2v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn perturbative_constant_examples() {
        assert_abs_diff_eq!(perturbative_poincare_constant(0.0).unwrap(), 1.0);
        // e^{0.2} / (2 e^{-0.2} - 1) = 1.221403 / 0.637462
        assert_abs_diff_eq!(
            perturbative_poincare_constant(0.1).unwrap(),
            1.9160,
            epsilon = 1e-4
        );
        assert!(perturbative_poincare_constant(2f64.sqrt().ln()).is_err());
        assert!(perturbative_poincare_constant(1.0).is_err());
        assert!(perturbative_poincare_constant(-0.1).is_err());
    }

    #[test]
    fn generalized_constant_examples() {
        let unit = ConvexBaseSpec::quadratic(1.0).unwrap();
        assert_abs_diff_eq!(generalized_perturbative_constant(0.0, &unit).unwrap(), 1.0);

        let wide = ConvexBaseSpec::new(ConvexBase::Quadratic { curvature: 1.5 }, 1.0, 2.0).unwrap();
        assert!(generalized_perturbative_constant(0.0, &wide).is_err());

        let two = ConvexBaseSpec::quadratic(2.0).unwrap();
        // e^{0.2} / (4 e^{-0.2} - 2) = 1.221403 / 1.274923
        assert_abs_diff_eq!(
            generalized_perturbative_constant(0.1, &two).unwrap(),
            0.9580,
            epsilon = 1e-4
        );
        for osc in [0.0, 0.05, 0.1, 0.3] {
            assert_abs_diff_eq!(
                generalized_perturbative_constant(osc, &unit).unwrap(),
                perturbative_poincare_constant(osc).unwrap(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn constant_blows_up_at_threshold() {
        let edge = 2f64.sqrt().ln();
        let near = perturbative_poincare_constant(edge - 1e-6).unwrap();
        assert!(near > 1e4);
        let mut prev = 0.0;
        for k in 0..100 {
            let p = perturbative_poincare_constant(edge * k as f64 / 100.0).unwrap();
            assert!(p >= 1.0 && p > prev);
            prev = p;
        }
    }

    #[test]
    fn convex_base_rejects_bad_bounds() {
        assert!(ConvexBaseSpec::quadratic(0.0).is_err());
        assert!(ConvexBaseSpec::new(ConvexBase::Quadratic { curvature: 1.0 }, 2.0, 1.0).is_err());
        let b = ConvexBaseSpec::quadratic_cos(1.0, 0.2).unwrap();
        for k in 0..2000 {
            let u = -10.0 + 0.01 * k as f64;
            let c = b.phi_second(u);
            assert!(c >= b.alpha - 1e-12 && c <= b.beta + 1e-12);
        }
    }

    fn shipped() -> Vec<PerturbationSpec> {
        vec![
            PerturbationSpec::zero(),
            PerturbationSpec::sine(0.05),
            PerturbationSpec::sine(0.2),
            PerturbationSpec::poly_sine(vec![0.0, 0.1, 0.05], vec![0.3, 1.0]).unwrap(),
            PerturbationSpec::poly_sine(vec![0.02, -0.1, 0.0, 0.04], vec![0.0, 2.0]).unwrap(),
        ]
    }

    #[test]
    fn shipped_families_respect_bounds_on_dense_grid() {
        for p in shipped() {
            p.validate_bounds(-50.0, 50.0, 1e-3).unwrap();
            assert!(p.osc_f <= 2.0 * p.sup_f + 1e-15);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for p in shipped() {
            let mut consts = Vec::new();
            for h in [1e-2, 1e-3, 1e-4] {
                let mut worst: f64 = 0.0;
                for k in 0..400 {
                    let u = -7.0 + 0.035 * k as f64;
                    let fd1 = (p.f(u + h) - p.f(u - h)) / (2.0 * h);
                    let fd2 = (p.df(u + h) - p.df(u - h)) / (2.0 * h);
                    worst = worst.max((p.df(u) - fd1).abs()).max((p.d2f(u) - fd2).abs());
                }
                consts.push(worst / (h * h));
            }
            // C stays bounded as h shrinks (roundoff enters only below h ~ 1e-5).
            let cmax = consts.iter().cloned().fold(0.0, f64::max);
            assert!(cmax < 10.0, "{}: {consts:?}", p.label());
        }
    }

    #[test]
    fn non_affine_inner_polynomial_is_rejected() {
        assert!(PerturbationSpec::poly_sine(vec![0.0, 0.1], vec![0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn family_json_roundtrip() {
        let f: Family = serde_json::from_str(r#"{"kind":"sine","eps":0.1}"#).unwrap();
        assert_eq!(f, Family::Sine { eps: 0.1 });
        let f: Family = serde_json::from_str(r#"{"kind":"zero"}"#).unwrap();
        assert_eq!(f, Family::Zero);
        assert!(serde_json::from_str::<Family>(r#"{"kind":"sine","eps":0.1,"x":1}"#).is_err());
    }
}
