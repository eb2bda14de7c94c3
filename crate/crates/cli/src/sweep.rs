//! Poincaré estimates across families, sizes and totals.
//!
//! Cells run on the rayon pool, each with its own derived seed, and each
//! writes its own table; the summary is assembled once all cells are in.

use rayon::prelude::*;
use serde::Serialize;

use spinlab_core::funineq::{generator_gap, variational_gap_lower_bound, GridSpec, Method};
use spinlab_core::observable::Observable;
use spinlab_core::sampler::{derive_seed, sample_sigma, ChainConfig, MRule};
use spinlab_core::{ConservativeModel, Family, PerturbationSpec};

use crate::config::Experiment;
use crate::output::{num, Artifacts, Table};

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub family: String,
    pub n: usize,
    pub total: f64,
    pub estimate: f64,
    pub err: f64,
    pub method: Method,
    pub best: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySummary {
    pub family: String,
    pub max: f64,
    pub min: f64,
    /// Largest estimate over the smaller half of the sizes.
    pub max_lower_half: f64,
    /// Largest estimate over the larger half of the sizes.
    pub max_upper_half: f64,
    /// `max_upper_half / max_lower_half`.
    pub plateau_ratio: f64,
    /// The upper half exceeds the lower by less than [`PLATEAU_TOLERANCE`].
    pub bounded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub cells: usize,
    pub max: f64,
    pub min: f64,
    /// Sizes at or above this value form the upper half.
    pub split_n: usize,
    pub families: Vec<FamilySummary>,
    pub bounded: bool,
}

pub const PLATEAU_TOLERANCE: f64 = 0.25;

pub fn sweep_cells(
    families: &[Family],
    n_list: &[usize],
    m_rules: &[MRule],
    grid_max_n: usize,
    grid: &GridSpec,
    chain: &ChainConfig,
) -> spinlab_core::Result<Vec<SweepCell>> {
    let mut jobs = Vec::new();
    for (fi, f) in families.iter().enumerate() {
        for &n in n_list {
            for (ri, r) in m_rules.iter().enumerate() {
                jobs.push((fi, f, n, ri, *r));
            }
        }
    }
    jobs.par_iter()
        .map(|&(fi, f, n, ri, rule)| {
            let p = PerturbationSpec::from_family(f)?;
            let m = ConservativeModel::new(n, rule.total(n), p)?;
            if n <= grid_max_n {
                let r = generator_gap(&m, grid)?;
                Ok(SweepCell {
                    family: m.pert.label(),
                    n,
                    total: m.total,
                    estimate: r.poincare_estimate,
                    err: r.error_estimate,
                    method: r.method,
                    best: None,
                })
            } else {
                let stream = ((fi as u64) << 40) | ((n as u64) << 8) | ri as u64;
                let batch = sample_sigma(&m, &chain.with_seed(derive_seed(chain.seed, stream)))?;
                let v = variational_gap_lower_bound(&m, &batch, &Observable::poincare_dictionary(n))?;
                Ok(SweepCell {
                    family: m.pert.label(),
                    n,
                    total: m.total,
                    estimate: v.bound.value,
                    err: v.bound.err,
                    method: Method::VariationalSamples,
                    best: Some(v.best),
                })
            }
        })
        .collect()
}

pub fn summarize(cells: &[SweepCell]) -> SweepSummary {
    let mut ns: Vec<usize> = cells.iter().map(|c| c.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let split_n = ns.get(ns.len() / 2).copied().unwrap_or(0);
    let mut names: Vec<String> = Vec::new();
    for c in cells {
        if !names.contains(&c.family) {
            names.push(c.family.clone());
        }
    }
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let families: Vec<FamilySummary> = names
        .into_iter()
        .map(|name| {
            let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.family == name).collect();
            let lo = max_of(&mut mine.iter().filter(|c| c.n < split_n).map(|c| c.estimate));
            let hi = max_of(&mut mine.iter().filter(|c| c.n >= split_n).map(|c| c.estimate));
            let ratio = hi / lo;
            FamilySummary {
                max: max_of(&mut mine.iter().map(|c| c.estimate)),
                min: mine.iter().map(|c| c.estimate).fold(f64::INFINITY, f64::min),
                max_lower_half: lo,
                max_upper_half: hi,
                plateau_ratio: ratio,
                // With a single size there is nothing to compare against.
                bounded: !lo.is_finite() || ratio < 1.0 + PLATEAU_TOLERANCE,
                family: name,
            }
        })
        .collect();
    SweepSummary {
        cells: cells.len(),
        max: max_of(&mut cells.iter().map(|c| c.estimate)),
        min: cells.iter().map(|c| c.estimate).fold(f64::INFINITY, f64::min),
        split_n,
        bounded: families.iter().all(|f| f.bounded),
        families,
    }
}

pub fn uniformity_sweep(out: &mut Artifacts, exp: &Experiment) -> anyhow::Result<SweepSummary> {
    let Experiment::UniformitySweep { families, n_list, m_rules, grid_max_n, grid, chain } = exp else {
        anyhow::bail!("not a sweep");
    };
    let cells = sweep_cells(families, n_list, m_rules, *grid_max_n, grid, chain)?;
    let header = ["family", "n", "M", "P", "err", "method", "best"];
    let row = |c: &SweepCell| {
        vec![
            c.family.clone(),
            c.n.to_string(),
            num(c.total),
            num(c.estimate),
            num(c.err),
            serde_json::to_value(c.method)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            c.best.clone().unwrap_or_default(),
        ]
    };
    let mut all = Table::new(&header);
    for (k, c) in cells.iter().enumerate() {
        let mut t = Table::new(&header);
        t.push(row(c));
        out.csv(format!("cells/cell_{k:04}.csv"), &t)?;
        all.push(row(c));
    }
    out.csv("sweep.csv", &all)?;
    let summary = summarize(&cells);
    out.json("summary.json", &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(n: usize, v: f64) -> SweepCell {
        SweepCell {
            family: "zero".into(),
            n,
            total: 0.0,
            estimate: v,
            err: 0.0,
            method: Method::VariationalSamples,
            best: None,
        }
    }

    #[test]
    fn plateau_flag() {
        let flat = [cell(2, 1.0), cell(4, 1.1), cell(16, 1.05), cell(32, 1.2)];
        let s = summarize(&flat);
        assert_eq!(s.split_n, 16);
        assert!(s.bounded);
        let rising = [cell(2, 1.0), cell(4, 1.0), cell(16, 1.5), cell(32, 2.0)];
        assert!(!summarize(&rising).bounded);
    }

    #[test]
    fn gaussian_cells_are_one() {
        let cells = sweep_cells(
            &[Family::Zero],
            &[2],
            &[MRule::Zero, MRule::MeanOne],
            2,
            &GridSpec::default(),
            &ChainConfig::default(),
        )
        .unwrap();
        for c in cells {
            assert!((c.estimate - 1.0).abs() < 0.02, "{c:?}");
        }
    }
}
