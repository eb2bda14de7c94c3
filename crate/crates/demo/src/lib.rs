//! Browser bindings: a spectral gap, the lattice comparison ratio and a
//! Kawasaki slow-mode trace. The plain functions are usable (and tested)
//! natively; the `wasm_bindgen` wrappers only translate errors.

use wasm_bindgen::prelude::*;

use spinlab_core::funineq::{generator_gap, GridSpec};
use spinlab_core::kawasaki::{self, simulate_kawasaki, LatticeBox};
use spinlab_core::potential::perturbative_poincare_constant;
use spinlab_core::sampler::ChainConfig;
use spinlab_core::{ConservativeModel, PerturbationSpec};

fn pert(eps: f64) -> PerturbationSpec {
    if eps == 0.0 {
        PerturbationSpec::zero()
    } else {
        PerturbationSpec::sine(eps)
    }
}

/// Grid Poincaré constant of `σ_M` with `F = eps·sin`, and the perturbative bound.
pub fn gap(n: usize, total: f64, eps: f64, nodes: usize) -> spinlab_core::Result<(f64, f64)> {
    let p = pert(eps);
    let bound = perturbative_poincare_constant(p.osc_f)?;
    let m = ConservativeModel::new(n, total, p)?;
    let r = generator_gap(
        &m,
        &GridSpec {
            nodes,
            ..GridSpec::default()
        },
    )?;
    Ok((r.poincare_estimate, bound))
}

pub fn ratio(d: usize, l: usize) -> spinlab_core::Result<f64> {
    kawasaki::comparison_ratio(&LatticeBox::new(d, l)?)
}

/// Slow-mode value after each sweep of a one-dimensional box of side `l`.
pub fn trace(l: usize, eps: f64, sweeps: usize, seed: u64) -> spinlab_core::Result<Vec<f64>> {
    let c = ChainConfig {
        burn_in: 0,
        samples: sweeps,
        seed,
        ..ChainConfig::default()
    };
    Ok(simulate_kawasaki(&LatticeBox::new(1, l)?, &pert(eps), 0.0, &c)?.series)
}

fn js(e: spinlab_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Returns `[P, bound]`.
#[wasm_bindgen(js_name = spectralGap)]
pub fn spectral_gap(n: usize, total: f64, eps: f64, nodes: usize) -> Result<Vec<f64>, JsError> {
    gap(n, total, eps, nodes).map(|(p, b)| vec![p, b]).map_err(js)
}

#[wasm_bindgen(js_name = comparisonRatio)]
pub fn comparison_ratio(d: usize, l: usize) -> Result<f64, JsError> {
    ratio(d, l).map_err(js)
}

#[wasm_bindgen(js_name = kawasakiTrace)]
pub fn kawasaki_trace(l: usize, eps: f64, sweeps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    trace(l, eps, sweeps, seed).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_single_coordinate() {
        // One free coordinate with Hessian 2.
        let (p, b) = gap(1, 0.0, 0.0, 32).unwrap();
        assert!((p - 0.5).abs() < 0.01, "{p}");
        assert_eq!(b, 1.0);
    }

    #[test]
    fn two_site_ratio() {
        assert!((ratio(1, 2).unwrap() - 0.5).abs() < 1e-12);
        assert!(ratio(1, 1).is_err());
    }

    #[test]
    fn trace_is_reproducible() {
        let a = trace(8, 0.1, 200, 3).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, trace(8, 0.1, 200, 3).unwrap());
    }
}
