//! Black-box evaluation backends.
//!
//! Every backend turns a soft prompt into an instruction (the generator `g`)
//! and scores instructions per ambiguity atom. [`synthetic`] is a
//! deterministic pseudo-LLM with controllable distribution shift;
//! [`external`] talks to a chat-completions endpoint.

pub mod external;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::config::{AtomMode, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Instruction, ProjectionMatrix, SoftPrompt};

pub use external::{ExternalConfig, ExternalEvaluator, ExternalExample, ExternalTask};
pub use synthetic::{
    Quantizer, SyntheticAtom, SyntheticEvaluator, SyntheticSuite, SyntheticTask, Template,
};

/// Which distribution an instruction is scored under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    Validation,
    Test,
}

/// Outcome of scoring one instruction on every atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    pub instruction: Instruction,
    /// One score per atom, each in `[0, 1]`.
    pub atom_scores: Vec<f64>,
    /// Simulated or real model queries spent on this evaluation.
    pub calls_consumed: u64,
    /// Examples whose request failed after all retries (scored 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged: Vec<usize>,
}

pub trait Evaluator: Send + Sync {
    /// Number of ambiguity atoms the scores are reported over.
    fn n_atoms(&self) -> usize;

    /// Width of the projected prompt the generator consumes.
    fn projected_dim(&self) -> usize;

    /// The instruction generator `v = g(Aᵀp)`.
    fn generate_instruction(&self, p: &SoftPrompt, a: &ProjectionMatrix) -> Result<Instruction>;

    fn evaluate(&self, instruction: &Instruction, mode: ScoreMode) -> Result<EvaluatorReport>;

    /// Whether a held-out test distribution is available.
    fn supports_test(&self) -> bool {
        false
    }
}

fn default_suite() -> String {
    "shift".to_string()
}

/// Evaluator selection in an experiment file (`[evaluator]` table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    /// A task of a synthetic suite: `shift` and `control` are bundled, any
    /// other value is read as a path to a suite JSON file.
    Synthetic {
        #[serde(default = "default_suite")]
        suite: String,
        #[serde(default)]
        task: usize,
    },
    External(ExternalConfig),
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Synthetic {
            suite: default_suite(),
            task: 0,
        }
    }
}

impl EvaluatorSpec {
    pub fn build(&self, config: &RunConfig) -> Result<Box<dyn Evaluator>> {
        let evaluator: Box<dyn Evaluator> = match self {
            EvaluatorSpec::Synthetic { suite, task } => {
                let suite = SyntheticSuite::load(suite)?;
                let task = suite.task(*task)?.clone();
                Box::new(SyntheticEvaluator::new(
                    task,
                    suite.quantizer,
                    suite.examples_per_atom,
                    config.atom_mode,
                )?)
            }
            EvaluatorSpec::External(ext) => Box::new(ExternalEvaluator::new(ext.clone(), config.atom_mode)?),
        };
        if evaluator.projected_dim() != config.d_prime {
            return Err(Error::config(
                "d_prime",
                format!(
                    "evaluator expects projected width {}, configuration has {}",
                    evaluator.projected_dim(),
                    config.d_prime
                ),
            ));
        }
        Ok(evaluator)
    }

    /// Same evaluator family pointed at another task of the suite.
    pub fn with_task(&self, task: usize) -> Self {
        match self {
            EvaluatorSpec::Synthetic { suite, .. } => EvaluatorSpec::Synthetic {
                suite: suite.clone(),
                task,
            },
            other => other.clone(),
        }
    }

    /// Number of tasks available to [`with_task`](Self::with_task).
    pub fn task_count(&self) -> Result<usize> {
        match self {
            EvaluatorSpec::Synthetic { suite, .. } => Ok(SyntheticSuite::load(suite)?.tasks.len()),
            EvaluatorSpec::External(_) => Ok(1),
        }
    }
}

/// Per-atom calls for one evaluation under `mode`.
pub(crate) fn calls_per_atom(mode: AtomMode, examples: usize) -> u64 {
    match mode {
        AtomMode::PerTask => 1,
        AtomMode::PerExample => examples as u64,
    }
}
