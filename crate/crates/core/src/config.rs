//! Run configuration and the TOML experiment file.
//!
//! An experiment file has a `[run]` table holding [`RunConfig`] fields and an
//! `[evaluator]` table selecting the black box. Every field is optional;
//! omitted fields take the defaults below.
//!
//! | field | default | meaning |
//! |---|---|---|
//! | `d` | 10 | soft prompt dimension |
//! | `d_prime` | 4 | projected width fed to the instruction generator |
//! | `tau` | 1.0 | initialisation and clamping bound for prompt coordinates |
//! | `n_exemplars` | 5 | exemplars shown to the instruction generator |
//! | `max_steps` | 30 | maximal number of optimization rounds `M` |
//! | `batch_size` | 25 | prompts evaluated per round |
//! | `beta_scale`, `beta_inner` | 2.0, 2.0 | `beta(m) = scale * sqrt(inner * ln(m + 1))` |
//! | `epsilon` | 0.1 | ambiguity radius |
//! | `epsilon_schedule` | `constant` | `constant` or `inverse-sqrt` (`eps / sqrt(m + 1)`) |
//! | `divergence` | `kl` | `kl`, `tv` or `w1` |
//! | `ground_metric` | unset | W1 atom distances; the 0/1 metric when unset |
//! | `kernel` | `sandwich` | `sandwich` or `coupled` |
//! | `lambda` | 0.5 | latent/instruction mix of the coupled kernel |
//! | `lengthscale`, `signal_variance` | 1.0, 1.0 | latent squared-exponential kernel |
//! | `jitter` | 1e-6 | initial diagonal jitter (escalates x10 up to 1e-2) |
//! | `noise_variance` | 1e-4 | GP observation noise |
//! | `ema_rate`, `ema_delta` | 0.2, 0.01 | reference-distribution EMA rate and smoothing |
//! | `seed` | 0 | master seed |
//! | `atom_mode` | `per-task` | `per-task` or `per-example` |
//! | `acquisition_mode` | `robust` | `nominal-ei`, `nominal-ucb`, `robust`, `dro-without-bo` |
//! | `surrogate` | `per-atom` | `per-atom` or `shared` (one GP with atom correlation) |
//! | `shared_atom_correlation` | 0.5 | cross-atom correlation of the shared surrogate |
//! | `w_star_mode` | `per-candidate` | `per-candidate` or `economy` |
//! | `mixture_weight` | unset | weight of the nominal score blended into the robust score |
//! | `cma_generations` | 10 | CMA-ES generations per round |
//! | `cma_sigma` | 0.3 | initial CMA-ES step size as a fraction of `tau` |
//! | `atoms_per_round` | 2 | atoms sampled per round when more are available |
//! | `patience` | unset | rounds without improvement before stopping early |
//! | `improvement_tol` | 1e-3 | improvement that resets the patience counter |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ambiguity::Divergence;
use crate::error::{Error, Result};
use crate::evaluators::EvaluatorSpec;
use crate::kernels::KernelForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtomMode {
    PerTask,
    PerExample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionMode {
    NominalEi,
    NominalUcb,
    Robust,
    DroWithoutBo,
}

impl AcquisitionMode {
    pub const ALL: [AcquisitionMode; 4] = [
        AcquisitionMode::NominalEi,
        AcquisitionMode::NominalUcb,
        AcquisitionMode::Robust,
        AcquisitionMode::DroWithoutBo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionMode::NominalEi => "nominal-ei",
            AcquisitionMode::NominalUcb => "nominal-ucb",
            AcquisitionMode::Robust => "robust",
            AcquisitionMode::DroWithoutBo => "dro-without-bo",
        }
    }

    /// Modes that rank the history by a worst-case aggregate.
    pub fn is_robust(self) -> bool {
        matches!(self, AcquisitionMode::Robust | AcquisitionMode::DroWithoutBo)
    }
}

impl std::fmt::Display for AcquisitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AcquisitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase().replace('_', "-");
        AcquisitionMode::ALL
            .into_iter()
            .find(|m| m.name() == normalized)
            .ok_or_else(|| Error::config("acquisition_mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateMode {
    PerAtom,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WStarMode {
    PerCandidate,
    Economy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonSchedule {
    Constant,
    InverseSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub d_prime: usize,
    pub tau: f64,
    pub n_exemplars: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub beta_scale: f64,
    pub beta_inner: f64,
    pub epsilon: f64,
    pub epsilon_schedule: EpsilonSchedule,
    pub divergence: Divergence,
    pub ground_metric: Option<Vec<Vec<f64>>>,
    pub kernel: KernelForm,
    pub lambda: f64,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub jitter: f64,
    pub noise_variance: f64,
    pub ema_rate: f64,
    pub ema_delta: f64,
    pub seed: u64,
    pub atom_mode: AtomMode,
    pub acquisition_mode: AcquisitionMode,
    pub surrogate: SurrogateMode,
    pub shared_atom_correlation: f64,
    pub w_star_mode: WStarMode,
    pub mixture_weight: Option<f64>,
    pub cma_generations: usize,
    pub cma_sigma: f64,
    pub atoms_per_round: usize,
    pub patience: Option<usize>,
    pub improvement_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 10,
            d_prime: 4,
            tau: 1.0,
            n_exemplars: 5,
            max_steps: 30,
            batch_size: 25,
            beta_scale: 2.0,
            beta_inner: 2.0,
            epsilon: 0.1,
            epsilon_schedule: EpsilonSchedule::Constant,
            divergence: Divergence::Kl,
            ground_metric: None,
            kernel: KernelForm::Sandwich,
            lambda: 0.5,
            lengthscale: 1.0,
            signal_variance: 1.0,
            jitter: 1e-6,
            noise_variance: 1e-4,
            ema_rate: 0.2,
            ema_delta: 0.01,
            seed: 0,
            atom_mode: AtomMode::PerTask,
            acquisition_mode: AcquisitionMode::Robust,
            surrogate: SurrogateMode::PerAtom,
            shared_atom_correlation: 0.5,
            w_star_mode: WStarMode::PerCandidate,
            mixture_weight: None,
            cma_generations: 10,
            cma_sigma: 0.3,
            atoms_per_round: 2,
            patience: None,
            improvement_tol: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, field: &str, message: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, message))
            }
        }
        check(self.d >= 1, "d", "must be >= 1")?;
        check(self.d_prime >= 1, "d_prime", "must be >= 1")?;
        check(self.tau.is_finite() && self.tau >= 0.0, "tau", "must be finite and >= 0")?;
        check(self.max_steps >= 1, "max_steps", "must be >= 1")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(
            self.beta_scale.is_finite() && self.beta_scale >= 0.0,
            "beta_scale",
            "must be finite and >= 0",
        )?;
        check(
            self.beta_inner.is_finite() && self.beta_inner >= 0.0,
            "beta_inner",
            "must be finite and >= 0",
        )?;
        check(self.epsilon.is_finite() && self.epsilon >= 0.0, "epsilon", "must be finite and >= 0")?;
        check((0.0..=1.0).contains(&self.lambda), "lambda", "must lie in [0, 1]")?;
        check(self.lengthscale > 0.0 && self.lengthscale.is_finite(), "lengthscale", "must be > 0")?;
        check(
            self.signal_variance > 0.0 && self.signal_variance.is_finite(),
            "signal_variance",
            "must be > 0",
        )?;
        check(self.jitter >= 0.0 && self.jitter <= 1e-2, "jitter", "must lie in [0, 1e-2]")?;
        check(self.noise_variance >= 0.0 && self.noise_variance.is_finite(), "noise_variance", "must be >= 0")?;
        check(self.ema_rate > 0.0 && self.ema_rate <= 1.0, "ema_rate", "must lie in (0, 1]")?;
        check(self.ema_delta > 0.0 && self.ema_delta.is_finite(), "ema_delta", "must be > 0")?;
        check(
            (0.0..=1.0).contains(&self.shared_atom_correlation),
            "shared_atom_correlation",
            "must lie in [0, 1]",
        )?;
        if let Some(w) = self.mixture_weight {
            check((0.0..=1.0).contains(&w), "mixture_weight", "must lie in [0, 1]")?;
        }
        check(self.cma_generations >= 1, "cma_generations", "must be >= 1")?;
        check(self.cma_sigma > 0.0 && self.cma_sigma.is_finite(), "cma_sigma", "must be > 0")?;
        check(self.atoms_per_round >= 1, "atoms_per_round", "must be >= 1")?;
        if let Some(p) = self.patience {
            check(p >= 1, "patience", "must be >= 1")?;
        }
        if let Some(metric) = &self.ground_metric {
            crate::ambiguity::validate_metric(metric)
                .map_err(|e| Error::config("ground_metric", e.to_string()))?;
        }
        Ok(())
    }

    /// Ambiguity radius for round `m`.
    pub fn epsilon_at(&self, m: usize) -> f64 {
        match self.epsilon_schedule {
            EpsilonSchedule::Constant => self.epsilon,
            EpsilonSchedule::InverseSqrt => self.epsilon / ((m + 1) as f64).sqrt(),
        }
    }
}

/// Contents of an experiment file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::parse("config", e.message()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        if let Some(toml::Value::Table(evaluator)) = table.get_mut("evaluator") {
            evaluator
                .entry("kind")
                .or_insert_with(|| toml::Value::String("synthetic".into()));
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::parse("config", e.message()))?;
        config.run.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }
}

/// Applies one `key=value` override. Bare keys address the `[run]` table;
/// dotted keys (`evaluator.task=3`) address nested tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    let mut path: Vec<&str> = key.split('.').collect();
    if path.len() == 1 {
        path.insert(0, "run");
    }
    let value = parse_override_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for part in parents {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d, 10);
        assert_eq!(c.batch_size, 25);
        assert_eq!(c.epsilon, 0.1);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.run, RunConfig::default());
    }

    #[test]
    fn overrides_apply_to_run_table() {
        let c = ExperimentConfig::from_toml_str(
            "[run]\nepsilon = 0.3\n",
            &["epsilon=0".into(), "acquisition_mode=nominal-ucb".into(), "evaluator.task=2".into()],
        )
        .unwrap();
        assert_eq!(c.run.epsilon, 0.0);
        assert_eq!(c.run.acquisition_mode, AcquisitionMode::NominalUcb);
        match c.evaluator {
            EvaluatorSpec::Synthetic { task, .. } => assert_eq!(task, 2),
            _ => panic!("expected synthetic evaluator"),
        }
    }

    #[test]
    fn invalid_field_is_named() {
        let err = ExperimentConfig::from_toml_str("[run]\nlambda = 1.5\n", &[]).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
        let err = ExperimentConfig::from_toml_str("[run]\nbatch_size = 0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        let err = ExperimentConfig::from_toml_str("[run]\nbogus = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AcquisitionMode::ALL {
            assert_eq!(m.name().parse::<AcquisitionMode>().unwrap(), m);
        }
        assert!("greedy".parse::<AcquisitionMode>().is_err());
    }
}
