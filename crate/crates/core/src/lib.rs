//! Distributionally robust Bayesian optimization of soft prompts.
//!
//! A soft prompt `p ∈ [−τ, τ]^d` is projected to the generator's input
//! space, turned into an instruction, and scored on several data atoms. A
//! Gaussian process per atom predicts the scores; the acquisition is the
//! worst-case expected UCB over an ambiguity ball around a reference
//! distribution on the atoms, and CMA-ES searches the prompt space for the
//! next batch.

pub mod acquisition;
pub mod ambiguity;
pub mod cmaes;
pub mod config;
pub mod error;
pub mod evaluators;
pub mod experiment;
pub mod gp;
pub mod kernels;
pub mod model;
pub mod plotdata;
pub mod runner;
pub mod trace;

pub use acquisition::{beta, AcquisitionScore};
pub use ambiguity::{solve_inner, AmbiguitySpec, Divergence, InnerSolution};
pub use config::{AcquisitionMode, AtomMode, ExperimentConfig, RunConfig};
pub use error::{Error, Result};
pub use evaluators::{Evaluator, EvaluatorSpec, ScoreMode};
pub use model::{EvalRecord, History, Instruction, ProjectionMatrix, SoftPrompt, WeightVector};
pub use runner::{run, run_with_sink, RunResult, RunSummary};
