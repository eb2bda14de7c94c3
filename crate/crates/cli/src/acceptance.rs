//! The acceptance suite: ten numbered criteria, each with a tolerance and a
//! wall-clock budget. A criterion passes only if both hold.

use std::time::{Duration, Instant};

use serde::Serialize;

use spinlab_core::funineq::{
    generator_gap, lsi_constant_grid, one_spin_curvature, one_spin_curvature_quadrature, GridSpec,
};
use spinlab_core::kawasaki::{build_paths, comparison_ratio, kawasaki_relaxation, LatticeBox};
use spinlab_core::luyau::{
    covariance_splitting_experiment, entropy_decomposition, gradient_identity_check,
    integration_by_parts_check, order_for_observable, variance_decomposition, ConditionalTower,
};
use spinlab_core::observable::Observable;
use spinlab_core::potential::perturbative_poincare_constant;
use spinlab_core::sampler::{covariance_decay_experiment, derive_seed, sample_sigma, ChainConfig, MRule};
use spinlab_core::stats::linear_fit;
use spinlab_core::{ConservativeModel, Family, PerturbationSpec};

use crate::sweep::{summarize, sweep_cells};

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub id: usize,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2}. {} ({:.1}s of {:.0}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.seconds,
            self.budget_seconds,
            self.detail
        )
    }
}

type Check = fn() -> spinlab_core::Result<(bool, String)>;

pub struct Criterion {
    pub id: usize,
    pub title: &'static str,
    pub budget: Duration,
    pub check: Check,
}

pub fn criteria() -> Vec<Criterion> {
    let c = |id, title, mins: u64, check| Criterion {
        id,
        title,
        budget: Duration::from_secs(60 * mins),
        check,
    };
    vec![
        c(1, "Gaussian exactness", 1, gaussian_exactness as Check),
        c(2, "perturbative bound", 2, perturbative_bound),
        c(3, "mean identity", 2, mean_identity),
        c(4, "covariance decay", 10, covariance_decay),
        c(5, "one-spin curvature", 10, one_spin),
        c(6, "Lu-Yau identities", 5, lu_yau),
        c(7, "path counting", 2, path_counting),
        c(8, "Kawasaki scaling", 30, kawasaki_scaling),
        c(9, "degeneracy of S", 1, s_degeneracy),
        c(10, "uniformity sweep", 20, uniformity),
    ]
}

pub fn run_criterion(c: &Criterion) -> Outcome {
    let t0 = Instant::now();
    let res = (c.check)();
    let elapsed = t0.elapsed();
    let (ok, mut detail) = match res {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = elapsed <= c.budget;
    if !in_time {
        detail.push_str("; over the time budget");
    }
    Outcome {
        id: c.id,
        title: c.title,
        passed: ok && in_time,
        detail,
        seconds: elapsed.as_secs_f64(),
        budget_seconds: c.budget.as_secs_f64(),
    }
}

/// Runs every criterion in order, calling `report` after each.
pub fn run_all(mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    criteria()
        .iter()
        .map(|c| {
            let o = run_criterion(c);
            report(&o);
            o
        })
        .collect()
}

fn model(n: usize, total: f64, p: PerturbationSpec) -> spinlab_core::Result<ConservativeModel> {
    ConservativeModel::new(n, total, p)
}

pub fn gaussian_exactness() -> spinlab_core::Result<(bool, String)> {
    let m = model(2, 0.0, PerturbationSpec::zero())?;
    let g = GridSpec::default();
    let p = generator_gap(&m, &g)?.poincare_estimate;
    let l = lsi_constant_grid(&m, &g)?.lsi_estimate.unwrap_or(f64::NAN);
    let ok = (p - 1.0).abs() <= 0.02 && (l - 2.0).abs() <= 0.05;
    Ok((ok, format!("P = {p:.4} (1 ± 0.02), L = {l:.4} (2 ± 0.05)")))
}

pub fn perturbative_bound() -> spinlab_core::Result<(bool, String)> {
    let p = PerturbationSpec::sine(0.05);
    let bound = perturbative_poincare_constant(p.osc_f)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [1, 2] {
        let r = generator_gap(&model(n, 0.0, p.clone())?, &GridSpec::default())?;
        ok &= r.poincare_estimate <= bound + r.error_estimate;
        parts.push(format!("n={n}: P = {:.4} ± {:.1e}", r.poincare_estimate, r.error_estimate));
    }
    Ok((ok, format!("{} <= {bound:.4}", parts.join(", "))))
}

pub fn mean_identity() -> spinlab_core::Result<(bool, String)> {
    let chain = ChainConfig::default();
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (fi, p) in [PerturbationSpec::zero(), PerturbationSpec::sine(0.1)].into_iter().enumerate() {
        for (n, total) in [(2, 3.0), (8, 0.0), (16, 17.0)] {
            let m = model(n, total, p.clone())?;
            let stream = derive_seed(fi as u64, n as u64);
            let batch = sample_sigma(&m, &chain.with_seed(stream))?;
            for e in batch.mean_estimates() {
                let z = (e.value - m.site_mean()).abs() / e.err;
                worst = worst.max(z);
                ok &= e.within(m.site_mean(), 3.0);
                checked += 1;
            }
        }
    }
    Ok((ok, format!("{checked} coordinate means, largest deviation {worst:.2} error bars (limit 3)")))
}

pub fn covariance_decay() -> spinlab_core::Result<(bool, String)> {
    let n_list = [4, 8, 16, 32, 64];
    let chain = ChainConfig::default();
    let r = covariance_decay_experiment(&PerturbationSpec::sine(0.2), &n_list, MRule::Zero, &chain)?;
    let slope_ok = (r.fit.slope + 1.0).abs() <= 0.2;
    let g = covariance_decay_experiment(&PerturbationSpec::zero(), &n_list, MRule::Zero, &chain.with_seed(1))?;
    let mut worst = 0.0f64;
    let mut exact_ok = true;
    for row in &g.rows {
        let target = -1.0 / (row.n as f64 + 1.0);
        worst = worst.max((row.cov.value - target).abs() / row.cov.err);
        exact_ok &= row.cov.within(target, 3.0);
    }
    Ok((
        slope_ok && exact_ok,
        format!(
            "slope {:.3} ± {:.3} (−1 ± 0.2); Gaussian rows within {worst:.2} error bars of −1/(n+1)",
            r.fit.slope, r.fit.slope_err
        ),
    ))
}

pub fn one_spin() -> spinlab_core::Result<(bool, String)> {
    let grid: Vec<f64> = (0..=12).map(|k| -3.0 + 0.5 * k as f64).collect();
    let p = PerturbationSpec::sine(0.1);
    let chain = ChainConfig::default();
    let mut cs = Vec::new();
    for n in [8, 16, 32] {
        let r = one_spin_curvature(&model(n, 0.0, p.clone())?, &grid, &chain.with_seed(n as u64))?;
        cs.push((n, r.c_fit));
    }
    let same_sign = cs.iter().all(|c| c.1 > 0.0) || cs.iter().all(|c| c.1 < 0.0);
    let hi = cs.iter().map(|c| c.1.abs()).fold(0.0, f64::max);
    let lo = cs.iter().map(|c| c.1.abs()).fold(f64::INFINITY, f64::min);
    let stable = same_sign && hi <= 2.0 * lo;
    let q = one_spin_curvature_quadrature(&model(3, 0.0, PerturbationSpec::zero())?, &grid)?;
    let dev = q.iter().map(|(_, v)| (v - 4.0 / 3.0).abs()).fold(0.0, f64::max);
    let cs_text: Vec<String> = cs.iter().map(|(n, c)| format!("n={n}: C={c:.3}")).collect();
    Ok((
        stable && dev <= 1e-3,
        format!("{}; spread {:.2} (≤ 2); Gaussian n=3 |φ''−4/3| ≤ {dev:.1e}", cs_text.join(", "), hi / lo),
    ))
}

pub fn lu_yau() -> spinlab_core::Result<(bool, String)> {
    let p = PerturbationSpec::sine(0.1);
    let mut worst_rel = 0.0f64;
    let mut worst_id = 0.0f64;
    let mut count = 0;
    for n in [2, 3] {
        let m = model(n, 0.0, p.clone())?;
        for f in Observable::decomposition_dictionary(n) {
            let tower = ConditionalTower::quadrature(&m, 96, order_for_observable(&m, &f, None)?)?;
            let fv = |x: &[f64]| f.eval(&m, x);
            let gv = |x: &[f64]| 1.0 + f.eval(&m, x).powi(2);
            for r in [variance_decomposition(&tower, &fv)?, entropy_decomposition(&tower, &gv)?] {
                worst_rel = worst_rel.max(r.relative_error());
                count += 1;
            }
            for k in 1..n {
                worst_id = worst_id.max(gradient_identity_check(&tower, &f, k)?.max_residual);
            }
            for k in 0..n {
                worst_id = worst_id.max(integration_by_parts_check(&tower, &f, k)?.max_residual);
            }
        }
    }
    Ok((
        worst_rel <= 1e-6 && worst_id <= 1e-5,
        format!("{count} decompositions, worst relative error {worst_rel:.1e} (≤ 1e-6); worst identity residual {worst_id:.1e} (≤ 1e-5)"),
    ))
}

pub fn path_counting() -> spinlab_core::Result<(bool, String)> {
    let r2 = comparison_ratio(&LatticeBox::new(1, 2)?)?;
    let sharp = (r2 - 0.5).abs() <= 1e-12;
    let r32 = comparison_ratio(&LatticeBox::new(1, 32)?)? / 1024.0;
    let target = 1.0 / std::f64::consts::PI.powi(2);
    let near = (r32 / target - 1.0).abs() <= 0.1;
    let mut bounded = true;
    let mut exps = Vec::new();
    for d in [1, 2] {
        let scaled: Vec<f64> = [2usize, 4, 8, 16, 32]
            .iter()
            .map(|&l| Ok(comparison_ratio(&LatticeBox::new(d, l)?)? / (l * l) as f64))
            .collect::<spinlab_core::Result<_>>()?;
        // 1/λ₂ ≤ L²/4 on any box, and the scaled ratio settles rather than grows.
        bounded &= scaled.iter().all(|&s| s <= 0.25) && scaled[scaled.len() - 1] <= scaled[0];
        // Even sides only: odd L carry a (1 - 1/L²) factor that tilts short fits upwards.
        let ls: Vec<usize> = (2..=6).map(|k| 2 * k).collect();
        let cong: Vec<f64> = ls
            .iter()
            .map(|&l| Ok(build_paths(&LatticeBox::new(d, l)?)?.max_congestion as f64))
            .collect::<spinlab_core::Result<_>>()?;
        let x: Vec<f64> = ls.iter().map(|&l| (l as f64).ln()).collect();
        let y: Vec<f64> = cong.iter().map(|c| c.ln()).collect();
        let slope = linear_fit(&x, &y).slope;
        bounded &= slope <= (d + 1) as f64 + 1e-9;
        exps.push(format!("d={d}: exponent {slope:.4}"));
    }
    Ok((
        sharp && near && bounded,
        format!(
            "L=2 ratio {r2}; L=32 ratio/L² = {r32:.5} vs 1/π² = {target:.5}; {}",
            exps.join(", ")
        ),
    ))
}

pub fn kawasaki_scaling() -> spinlab_core::Result<(bool, String)> {
    let chain = ChainConfig {
        burn_in: 2_000,
        samples: 60_000,
        ..ChainConfig::default()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [PerturbationSpec::zero(), PerturbationSpec::sine(0.2)] {
        let r = kawasaki_relaxation(1, &p, 0.0, &chain, &[4, 8, 16, 32])?;
        ok &= (r.z - 2.0).abs() <= 0.3;
        parts.push(format!("{}: z = {:.3} ± {:.3}", p.label(), r.z, r.fit.slope_err));
    }
    Ok((ok, format!("{} (2 ± 0.3)", parts.join(", "))))
}

pub fn s_degeneracy() -> spinlab_core::Result<(bool, String)> {
    let m = model(8, 3.0, PerturbationSpec::zero())?;
    let mut dict = Observable::decomposition_dictionary(8);
    dict.extend(Observable::poincare_dictionary(8));
    let rows = covariance_splitting_experiment(&m, &dict, &[2, 4], &ChainConfig::default())?;
    let mut worst = 0.0f64;
    let mut ok = true;
    for r in &rows {
        worst = worst.max(r.cov.value.abs());
        ok &= r.cov.within(0.0, 3.0);
    }
    Ok((ok, format!("{} entries, largest |cov(f, S)| = {worst:.1e}", rows.len())))
}

pub fn uniformity() -> spinlab_core::Result<(bool, String)> {
    let cells = sweep_cells(
        &[Family::Sine { eps: 0.1 }],
        &[2, 4, 8, 16, 32, 64],
        &[MRule::Zero, MRule::MeanOne],
        0,
        &GridSpec::default(),
        &ChainConfig::default(),
    )?;
    let s = summarize(&cells);
    let f = &s.families[0];
    Ok((
        f.bounded && s.split_n == 16,
        format!(
            "max over n<16 {:.4}, max over n≥16 {:.4}, ratio {:.3} (< 1.25)",
            f.max_lower_half, f.max_upper_half, f.plateau_ratio
        ),
    ))
}
