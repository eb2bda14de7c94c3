//! Experiment configuration: one JSON object per run.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "experiment": {
//!     "kind": "gap",
//!     "model": {"n": 2, "M": 0.0, "perturbation": {"kind": "sine", "eps": 0.05}}
//!   }
//! }
//! ```
//!
//! Unknown keys are rejected at every level. Omitted blocks take the defaults
//! shown by the manifest of a run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use spinlab_core::funineq::{GridSpec, LsiOptions};
use spinlab_core::observable::Observable;
use spinlab_core::potential::{Family, PerturbationSpec};
use spinlab_core::sampler::{ChainConfig, MRule};
use spinlab_core::ConservativeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(rename = "M", default)]
    pub total: f64,
    #[serde(default = "zero_family")]
    pub perturbation: Family,
}

fn zero_family() -> Family {
    Family::Zero
}

impl ModelConfig {
    pub fn build(&self) -> spinlab_core::Result<ConservativeModel> {
        ConservativeModel::new(self.n, self.total, PerturbationSpec::from_family(&self.perturbation)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GapMethod {
    #[default]
    Grid,
    BakryEmery,
    Variational,
}

/// `x₁` values `lo + k (hi - lo)/(points - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linspace {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Linspace {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        (0..self.points)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.points - 1) as f64)
            .collect()
    }
}

fn default_x1_grid() -> Linspace {
    Linspace {
        lo: -3.0,
        hi: 3.0,
        points: 13,
    }
}

fn default_tower_nodes() -> usize {
    96
}

fn default_m_rules() -> Vec<MRule> {
    vec![MRule::Zero, MRule::MeanOne]
}

fn default_grid_max_n() -> usize {
    2
}

fn default_k_list() -> Vec<usize> {
    vec![4, 8, 16]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_list: Vec<usize>,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default)]
    pub chain: ChainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Gap {
        model: ModelConfig,
        #[serde(default)]
        method: GapMethod,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default)]
        chain: ChainConfig,
        /// Persist the variational chain as raw little-endian doubles.
        #[serde(default)]
        save_draws: bool,
    },
    Lsi {
        model: ModelConfig,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default)]
        lsi: LsiOptions,
    },
    Covdecay {
        perturbation: Family,
        n_list: Vec<usize>,
        #[serde(default = "default_m_rule")]
        m_rule: MRule,
        #[serde(default)]
        chain: ChainConfig,
    },
    Onespin {
        model: ModelConfig,
        #[serde(default = "default_x1_grid")]
        x1_grid: Linspace,
        #[serde(default)]
        chain: ChainConfig,
    },
    Luyau {
        model: ModelConfig,
        #[serde(default = "default_tower_nodes")]
        nodes: usize,
        /// Defaults to the decomposition dictionary of `model.n`.
        #[serde(default)]
        dictionary: Option<Vec<Observable>>,
        /// Covariance splitting across `n_list` with the model's perturbation.
        #[serde(default)]
        splitting: Option<SplitConfig>,
    },
    Kawasaki {
        d: usize,
        perturbation: Family,
        #[serde(default)]
        mean_spin: f64,
        l_list: Vec<usize>,
        #[serde(default)]
        chain: ChainConfig,
    },
    Paths {
        d: usize,
        l_list: Vec<usize>,
        /// Also write the per-edge congestion of every box.
        #[serde(default)]
        dump_congestion: bool,
    },
    Betalimit {
        model: ModelConfig,
        observable: Observable,
        beta_list: Vec<f64>,
        #[serde(default)]
        chain: ChainConfig,
    },
    UniformitySweep {
        families: Vec<Family>,
        n_list: Vec<usize>,
        #[serde(default = "default_m_rules")]
        m_rules: Vec<MRule>,
        /// Grid eigensolves for `n` up to this value, variational bounds above.
        #[serde(default = "default_grid_max_n")]
        grid_max_n: usize,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default)]
        chain: ChainConfig,
    },
}

fn default_m_rule() -> MRule {
    MRule::MeanOne
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gap { .. } => "gap",
            Self::Lsi { .. } => "lsi",
            Self::Covdecay { .. } => "covdecay",
            Self::Onespin { .. } => "onespin",
            Self::Luyau { .. } => "luyau",
            Self::Kawasaki { .. } => "kawasaki",
            Self::Paths { .. } => "paths",
            Self::Betalimit { .. } => "betalimit",
            Self::UniformitySweep { .. } => "uniformity_sweep",
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(ConfigError::Parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not need any computation.
    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |msg: String| -> anyhow::Result<()> { Err(ConfigError::Invalid(msg).into()) };
        let chain_ok = |c: &ChainConfig| c.validate().map_err(|e| ConfigError::Invalid(e.to_string()));
        match &self.experiment {
            Experiment::Gap { model, chain, .. } | Experiment::Onespin { model, chain, .. } => {
                model.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                chain_ok(chain)?;
            }
            Experiment::Lsi { model, .. } => {
                model.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            Experiment::Betalimit { model, chain, observable, beta_list } => {
                model.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                chain_ok(chain)?;
                observable
                    .validate(model.n)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if beta_list.is_empty() {
                    return bad("beta_list is empty".into());
                }
            }
            Experiment::Luyau { model, dictionary, splitting, .. } => {
                model.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if let Some(d) = dictionary {
                    for f in d {
                        f.validate(model.n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                    }
                }
                if let Some(s) = splitting {
                    chain_ok(&s.chain)?;
                    if s.n_list.is_empty() || s.k_list.is_empty() {
                        return bad("splitting needs non-empty n_list and k_list".into());
                    }
                }
            }
            Experiment::Covdecay { n_list, chain, perturbation, .. } => {
                PerturbationSpec::from_family(perturbation).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                chain_ok(chain)?;
                if n_list.is_empty() {
                    return bad("n_list is empty".into());
                }
            }
            Experiment::Kawasaki { l_list, chain, perturbation, .. } => {
                PerturbationSpec::from_family(perturbation).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                chain_ok(chain)?;
                if l_list.is_empty() {
                    return bad("l_list is empty".into());
                }
            }
            Experiment::Paths { l_list, .. } => {
                if l_list.is_empty() {
                    return bad("l_list is empty".into());
                }
            }
            Experiment::UniformitySweep { families, n_list, m_rules, chain, .. } => {
                if families.is_empty() || n_list.is_empty() || m_rules.is_empty() {
                    return bad("sweep grid is empty".into());
                }
                if n_list.contains(&0) {
                    return bad("n must be >= 1".into());
                }
                for f in families {
                    PerturbationSpec::from_family(f).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
                chain_ok(chain)?;
            }
        }
        Ok(())
    }
}

/// Configuration problems; the runner maps these to exit code 2.
#[derive(Debug)]
pub enum ConfigError {
    Parse(serde_json::Error),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Parse(e) => write!(f, "config does not parse: {e}"),
            Self::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Rejects configs whose experiment name is unknown with a clear message.
pub fn ensure_known_kind(text: &str) -> anyhow::Result<()> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(ConfigError::Parse)?;
    let kind = v.pointer("/experiment/kind").and_then(|k| k.as_str());
    const KINDS: [&str; 9] = [
        "gap", "lsi", "covdecay", "onespin", "luyau", "kawasaki", "paths", "betalimit", "uniformity_sweep",
    ];
    match kind {
        Some(k) if KINDS.contains(&k) => Ok(()),
        Some(k) => bail!(ConfigError::Invalid(format!("unknown experiment kind {k:?}"))),
        None => bail!(ConfigError::Invalid("missing experiment.kind".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_gap() {
        let c = ExperimentConfig::parse(
            r#"{"experiment":{"kind":"gap","model":{"n":2,"M":0.0,"perturbation":{"kind":"zero"}}}}"#,
        )
        .unwrap();
        assert_eq!(c.seed, 0);
        match c.experiment {
            Experiment::Gap { method, grid, .. } => {
                assert_eq!(method, GapMethod::Grid);
                assert_eq!(grid, GridSpec::default());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for text in [
            r#"{"experiment":{"kind":"gap","model":{"n":2}},"extra":1}"#,
            r#"{"experiment":{"kind":"gap","model":{"n":2},"extra":1}}"#,
            r#"{"experiment":{"kind":"gap","model":{"n":2,"extra":1}}}"#,
            r#"{"experiment":{"kind":"gap","model":{"n":2},"chain":{"extra":1}}}"#,
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(e.downcast_ref::<ConfigError>().is_some(), "{text}: {e}");
        }
    }

    #[test]
    fn empty_sweep_is_invalid() {
        let e = ExperimentConfig::parse(
            r#"{"experiment":{"kind":"uniformity_sweep","families":[],"n_list":[2]}}"#,
        )
        .unwrap_err();
        assert!(matches!(e.downcast_ref::<ConfigError>(), Some(ConfigError::Invalid(_))));
    }

    #[test]
    fn linspace_endpoints() {
        let l = Linspace { lo: -3.0, hi: 3.0, points: 7 };
        assert_eq!(l.values(), vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
    }
}
