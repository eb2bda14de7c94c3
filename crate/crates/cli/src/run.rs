//! One runner per experiment kind. Runners only compute; writing is left to
//! the caller so a failure leaves nothing behind.

use serde::Serialize;
use serde_json::json;

use spinlab_core::funineq::{
    bakry_emery, generator_gap, lsi_constant_grid_with, one_spin_curvature, one_spin_curvature_quadrature,
    variational_gap_lower_bound, SpectralReport,
};
use spinlab_core::kawasaki::{build_paths, comparison_ratio, kawasaki_relaxation, LatticeBox, DENSE_LIMIT};
use spinlab_core::luyau::{
    covariance_splitting_experiment, entropy_decomposition, gradient_identity_check,
    integration_by_parts_check, order_for_observable, variance_decomposition, ConditionalTower,
};
use spinlab_core::observable::Observable;
use spinlab_core::quadrature::MAX_DIM;
use spinlab_core::sampler::{
    beta_limit_check, covariance_decay_experiment, derive_seed, sample_sigma, ChainConfig,
};
use spinlab_core::stats::linear_fit;
use spinlab_core::{ConservativeModel, PerturbationSpec};

use crate::config::{Experiment, ExperimentConfig, GapMethod, ModelConfig};
use crate::output::{num, opt, Artifacts, Table};
use crate::sweep::uniformity_sweep;

/// Sets every nested chain or ascent seed from the run seed so the manifest
/// shows exactly what was used.
pub fn resolve(cfg: &mut ExperimentConfig) {
    let seed = cfg.seed;
    let set = |c: &mut ChainConfig| c.seed = seed;
    match &mut cfg.experiment {
        Experiment::Gap { chain, .. }
        | Experiment::Covdecay { chain, .. }
        | Experiment::Onespin { chain, .. }
        | Experiment::Kawasaki { chain, .. }
        | Experiment::Betalimit { chain, .. }
        | Experiment::UniformitySweep { chain, .. } => set(chain),
        Experiment::Lsi { lsi, .. } => lsi.seed = seed,
        Experiment::Luyau { splitting, .. } => {
            if let Some(s) = splitting {
                set(&mut s.chain)
            }
        }
        Experiment::Paths { .. } => {}
    }
}

/// Runs the experiment. Core errors are passed through untouched so the
/// caller can classify them.
pub fn execute(cfg: &ExperimentConfig) -> anyhow::Result<Artifacts> {
    let mut out = Artifacts::default();
    match &cfg.experiment {
        Experiment::Gap { model, method, grid, chain, save_draws } => {
            let m = model.build()?;
            let report = match method {
                GapMethod::Grid => generator_gap(&m, grid)?,
                GapMethod::BakryEmery => bakry_emery(&m, grid)?,
                GapMethod::Variational => {
                    let batch = sample_sigma(&m, chain)?;
                    let v = variational_gap_lower_bound(&m, &batch, &Observable::poincare_dictionary(m.n))?;
                    if *save_draws {
                        out.raw("draws.f64", batch.to_le_bytes());
                        out.json(
                            "draws.json",
                            &json!({"n": m.n, "samples": batch.samples(), "seed": chain.seed, "config": chain}),
                        )?;
                    }
                    out.json("variational.json", &v)?;
                    v.to_spectral()
                }
            };
            spectral_table(&mut out, "gap.csv", model, &m, &report)?;
            out.json("report.json", &report)?;
        }
        Experiment::Lsi { model, grid, lsi } => {
            let m = model.build()?;
            let report = lsi_constant_grid_with(&m, grid, lsi)?;
            spectral_table(&mut out, "lsi.csv", model, &m, &report)?;
            out.json("report.json", &report)?;
        }
        Experiment::Covdecay { perturbation, n_list, m_rule, chain } => {
            let p = PerturbationSpec::from_family(perturbation)?;
            let r = covariance_decay_experiment(&p, n_list, *m_rule, chain)?;
            let mut t = Table::new(&[
                "n", "M", "family", "cov", "cov_err", "iact", "force_var_per_site", "force_var_err",
                "acceptance_rate", "inconclusive", "gaussian_exact",
            ]);
            for row in &r.rows {
                let exact = p.is_zero().then(|| -1.0 / (row.n as f64 + 1.0));
                t.push(vec![
                    row.n.to_string(),
                    num(row.total),
                    p.label(),
                    num(row.cov.value),
                    num(row.cov.err),
                    num(row.cov.iact),
                    num(row.force_var_per_site.value),
                    num(row.force_var_per_site.err),
                    num(row.acceptance_rate),
                    row.inconclusive.to_string(),
                    opt(exact),
                ]);
            }
            out.csv("covdecay.csv", &t)?;
            out.json("report.json", &r)?;
        }
        Experiment::Onespin { model, x1_grid, chain } => {
            let m = model.build()?;
            let xs = x1_grid.values();
            let r = one_spin_curvature(&m, &xs, chain)?;
            let mut t = Table::new(&["n", "M", "family", "x1", "phi2", "phi2_err", "flagged"]);
            for row in &r.rows {
                t.push(vec![
                    m.n.to_string(),
                    num(m.total),
                    m.pert.label(),
                    num(row.x1),
                    num(row.phi2.value),
                    num(row.phi2.err),
                    row.flagged.to_string(),
                ]);
            }
            out.csv("onespin.csv", &t)?;
            if (2..=3).contains(&m.n) {
                let q = one_spin_curvature_quadrature(&m, &xs)?;
                let mut t = Table::new(&["x1", "phi2"]);
                for (x, v) in q {
                    t.push(vec![num(x), num(v)]);
                }
                out.csv("onespin_quadrature.csv", &t)?;
            }
            out.json("report.json", &r)?;
        }
        Experiment::Luyau { model, nodes, dictionary, splitting } => {
            let m = model.build()?;
            let dict = dictionary
                .clone()
                .unwrap_or_else(|| Observable::decomposition_dictionary(m.n));
            if m.n <= MAX_DIM {
                luyau_quadrature(&mut out, &m, *nodes, &dict)?;
            } else if splitting.is_none() {
                return Err(spinlab_core::Error::InvalidInput(format!(
                    "quadrature decompositions need n <= {MAX_DIM}; add a splitting block for n = {}",
                    m.n
                ))
                .into());
            }
            if let Some(s) = splitting {
                let mut t = Table::new(&[
                    "observable", "n", "block_size", "blocks", "eps", "cov", "cov_err", "lhs", "variance",
                    "grad_term", "c_eps_implied", "c_implied", "ent", "c_eps_implied_ent", "c_implied_ent",
                    "resolved",
                ]);
                let mut rows = Vec::new();
                for &n in &s.n_list {
                    let mn = m.with(n, m.total / m.sites() as f64 * (n + 1) as f64)?;
                    let d = Observable::decomposition_dictionary(n);
                    let c = s.chain.with_seed(derive_seed(s.chain.seed, n as u64));
                    let r = covariance_splitting_experiment(&mn, &d, &s.k_list, &c)?;
                    for row in &r {
                        t.push(vec![
                            row.observable.clone(),
                            row.n.to_string(),
                            row.block_size.to_string(),
                            row.blocks.to_string(),
                            num(row.eps),
                            num(row.cov.value),
                            num(row.cov.err),
                            num(row.lhs),
                            num(row.variance),
                            num(row.grad_term),
                            num(row.c_eps_implied),
                            num(row.c_implied),
                            num(row.ent),
                            num(row.c_eps_implied_ent),
                            num(row.c_implied_ent),
                            row.resolved.to_string(),
                        ]);
                    }
                    rows.extend(r);
                }
                out.csv("splitting.csv", &t)?;
                out.json("splitting.json", &rows)?;
            }
        }
        Experiment::Kawasaki { d, perturbation, mean_spin, l_list, chain } => {
            let p = PerturbationSpec::from_family(perturbation)?;
            let r = kawasaki_relaxation(*d, &p, *mean_spin, chain, l_list)?;
            let mut t = Table::new(&["d", "L", "family", "tau", "tau_err"]);
            for row in &r.rows {
                t.push(vec![row.d.to_string(), row.l.to_string(), row.family.clone(), num(row.tau), num(row.tau_err)]);
            }
            out.csv("kawasaki.csv", &t)?;
            out.json(
                "report.json",
                &json!({
                    "z": r.z,
                    "z_err": r.fit.slope_err,
                    "z_ci95": [r.z - r.fit.slope_ci, r.z + r.fit.slope_ci],
                    "fit": r.fit,
                    "rows": r.rows,
                }),
            )?;
        }
        Experiment::Paths { d, l_list, dump_congestion } => {
            paths(&mut out, *d, l_list, *dump_congestion)?;
        }
        Experiment::Betalimit { model, observable, beta_list, chain } => {
            let m = model.build()?;
            let r = beta_limit_check(&m, observable, beta_list, chain)?;
            let mut t = Table::new(&["beta", "value", "err", "gap", "reference"]);
            for row in &r.rows {
                t.push(vec![
                    num(row.beta),
                    num(row.value.value),
                    num(row.value.err),
                    num(row.gap),
                    num(r.reference.value),
                ]);
            }
            out.csv("betalimit.csv", &t)?;
            out.json("report.json", &r)?;
        }
        Experiment::UniformitySweep { .. } => {
            uniformity_sweep(&mut out, &cfg.experiment)?;
        }
    }
    Ok(out)
}

fn spectral_table(
    out: &mut Artifacts,
    name: &str,
    cfg: &ModelConfig,
    m: &ConservativeModel,
    r: &SpectralReport,
) -> anyhow::Result<()> {
    let mut t = Table::new(&["n", "M", "family", "P", "L", "method", "err"]);
    t.push(vec![
        cfg.n.to_string(),
        num(m.total),
        m.pert.label(),
        num(r.poincare_estimate),
        opt(r.lsi_estimate),
        serde_json::to_value(r.method)?.as_str().unwrap_or_default().to_string(),
        num(r.error_estimate),
    ]);
    out.csv(name, &t)
}

#[derive(Serialize)]
struct DecompositionEntry {
    observable: String,
    functional: &'static str,
    order: Vec<usize>,
    report: spinlab_core::luyau::DecompositionReport,
    relative_error: f64,
}

fn luyau_quadrature(out: &mut Artifacts, m: &ConservativeModel, nodes: usize, dict: &[Observable]) -> anyhow::Result<()> {
    let mut summary = Table::new(&[
        "observable", "functional", "total", "sum_terms", "relative_error", "one_spin_residual",
    ]);
    let mut terms = Table::new(&["observable", "functional", "k", "term"]);
    let mut ident = Table::new(&["observable", "identity", "k", "points", "max_residual", "max_lhs"]);
    let mut entries = Vec::new();
    for f in dict {
        let order = order_for_observable(m, f, None)?;
        let tower = ConditionalTower::quadrature(m, nodes, order.clone())?;
        let fv = |x: &[f64]| f.eval(m, x);
        let gv = |x: &[f64]| 1.0 + f.eval(m, x).powi(2);
        for (label, r) in [
            ("variance", variance_decomposition(&tower, &fv)?),
            ("entropy", entropy_decomposition(&tower, &gv)?),
        ] {
            let sum: f64 = r.terms.iter().sum();
            summary.push(vec![
                f.name(),
                label.into(),
                num(r.total),
                num(sum),
                num(r.relative_error()),
                num(r.one_spin_residual),
            ]);
            for (k, v) in r.terms.iter().enumerate() {
                terms.push(vec![f.name(), label.into(), (k + 1).to_string(), num(*v)]);
            }
            entries.push(DecompositionEntry {
                observable: f.name(),
                functional: label,
                order: order.clone(),
                relative_error: r.relative_error(),
                report: r,
            });
        }
        for k in 1..m.n {
            let r = gradient_identity_check(&tower, f, k)?;
            ident.push(vec![f.name(), "gradient".into(), k.to_string(), r.points.to_string(), num(r.max_residual), num(r.max_lhs)]);
        }
        for k in 0..m.n {
            let r = integration_by_parts_check(&tower, f, k)?;
            ident.push(vec![f.name(), "integration_by_parts".into(), k.to_string(), r.points.to_string(), num(r.max_residual), num(r.max_lhs)]);
        }
    }
    out.csv("decomposition.csv", &summary)?;
    out.csv("terms.csv", &terms)?;
    out.csv("identities.csv", &ident)?;
    out.json("report.json", &entries)
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRow {
    pub d: usize,
    pub l: usize,
    pub sites: usize,
    pub ratio: Option<f64>,
    pub max_congestion: u64,
    pub congestion_constant: f64,
    pub max_length: usize,
    pub path_constant: f64,
}

pub fn path_rows(d: usize, l_list: &[usize], dump: Option<&mut Artifacts>) -> anyhow::Result<Vec<PathRow>> {
    let mut rows = Vec::new();
    let mut dump = dump;
    for &l in l_list {
        let lat = LatticeBox::new(d, l)?;
        let ps = build_paths(&lat)?;
        let ratio = if lat.sites() <= DENSE_LIMIT { Some(comparison_ratio(&lat)?) } else { None };
        if let Some(out) = dump.as_deref_mut() {
            let mut t = Table::new(&["edge", "i", "j", "congestion"]);
            for (e, (&(i, j), c)) in ps.edges.iter().zip(&ps.congestion).enumerate() {
                t.push(vec![e.to_string(), i.to_string(), j.to_string(), c.to_string()]);
            }
            out.csv(format!("congestion_d{d}_L{l}.csv"), &t)?;
        }
        rows.push(PathRow {
            d,
            l,
            sites: lat.sites(),
            ratio,
            max_congestion: ps.max_congestion,
            congestion_constant: ps.congestion_constant(),
            max_length: ps.max_length,
            path_constant: ps.max_length as f64 * ps.max_congestion as f64 / (2.0 * lat.sites() as f64),
        });
    }
    Ok(rows)
}

fn paths(out: &mut Artifacts, d: usize, l_list: &[usize], dump: bool) -> anyhow::Result<()> {
    let rows = path_rows(d, l_list, if dump { Some(&mut *out) } else { None })?;
    let mut t = Table::new(&[
        "d", "L", "sites", "ratio", "ratio_over_L2", "max_congestion", "congestion_constant", "max_length",
        "path_constant",
    ]);
    for r in &rows {
        t.push(vec![
            r.d.to_string(),
            r.l.to_string(),
            r.sites.to_string(),
            opt(r.ratio),
            opt(r.ratio.map(|v| v / (r.l * r.l) as f64)),
            r.max_congestion.to_string(),
            num(r.congestion_constant),
            r.max_length.to_string(),
            num(r.path_constant),
        ]);
    }
    out.csv("paths.csv", &t)?;
    let fit = (rows.len() >= 2).then(|| {
        let x: Vec<f64> = rows.iter().map(|r| (r.l as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| (r.max_congestion as f64).ln()).collect();
        linear_fit(&x, &y)
    });
    out.json("report.json", &json!({"rows": rows, "congestion_exponent": fit}))
}
