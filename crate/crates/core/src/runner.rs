//! The optimization loop: nominal BO (EI or UCB over the reference-weighted
//! atoms), distributionally robust BO, and robust random search.
//!
//! Round 0 evaluates `batch_size` uniform prompts. Every later round fits
//! the per-atom surrogate, runs CMA-ES on the acquisition from the current
//! incumbent, and evaluates the `batch_size` best candidates. After each
//! round the reference distribution moves towards the atoms that scored
//! worst.
//!
//! Nominal UCB is the robust path with a zero radius, so the two arms share
//! every line of code and coincide exactly when `epsilon = 0`.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{beta_with, expected_improvement, robust_score, score_with_fixed_weight, ucb_vector, AcquisitionScore};
use crate::ambiguity::{solve_inner, AmbiguitySpec};
use crate::cmaes::{CmaParams, CmaState};
use crate::config::{AcquisitionMode, RunConfig, SurrogateMode, WStarMode};
use crate::error::{Error, Result};
use crate::evaluators::{Evaluator, EvaluatorReport, ScoreMode};
use crate::gp::{AtomGps, AtomSurrogate, KernelConfig, LatentFactor, Prediction, SharedGp};
use crate::model::{init_prompt, stream_rng, EvalRecord, History, Instruction, ProjectionMatrix, SoftPrompt, Stream, WeightVector};

/// How records are ranked when picking the best instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    /// Mean over atoms.
    Mean,
    /// Worst atom.
    Worst,
}

impl Aggregate {
    pub fn of(self, scores: &[f64]) -> f64 {
        match self {
            Aggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            Aggregate::Worst => scores.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Ranking used by a run: worst atom for robust arms with a non-zero
    /// radius, otherwise the mean. A zero-radius robust run therefore
    /// reports exactly what nominal UCB reports.
    pub fn for_config(config: &RunConfig) -> Self {
        if config.acquisition_mode.is_robust() && config.epsilon > 0.0 {
            Aggregate::Worst
        } else {
            Aggregate::Mean
        }
    }
}

/// One evaluated prompt as persisted in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEval {
    pub iteration: usize,
    pub prompt: Vec<f64>,
    pub instruction: String,
    pub atom_scores: Vec<f64>,
    /// Acquisition value that selected the prompt (absent for random picks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition: Option<f64>,
    /// `⟨ucb, w_ref⟩` of the prompt, when an acquisition was computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<f64>,
}

/// Everything that happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub epsilon: f64,
    pub beta: f64,
    /// Atoms whose weights the adversary could move this round.
    pub atoms: Vec<usize>,
    /// Reference distribution used for selection.
    pub w_ref: WeightVector,
    /// Adversarial weight of the top-ranked candidate.
    pub w_star: WeightVector,
    pub evaluations: Vec<TraceEval>,
    pub evaluator_calls: u64,
    /// Best aggregate score in the history after the round.
    pub best_so_far: f64,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub acquisition_mode: AcquisitionMode,
    /// Mode this run is equivalent to (`nominal-ucb` for a zero-radius
    /// robust run).
    pub effective_mode: AcquisitionMode,
    pub seed: u64,
    pub rounds: usize,
    pub evaluations: usize,
    pub evaluator_calls: u64,
    /// Calls spent scoring the best instruction under the test distribution
    /// (outside the optimization budget).
    pub test_evaluator_calls: u64,
    pub selection: Aggregate,
    pub best_index: usize,
    pub best_instruction: String,
    pub best_atom_scores: Vec<f64>,
    pub best_mean_index: usize,
    pub best_worst_index: usize,
    /// Scores of the best instruction under the test distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_atom_scores: Option<Vec<f64>>,
    pub final_w_ref: WeightVector,
}

impl RunSummary {
    pub fn best_mean(&self) -> f64 {
        Aggregate::Mean.of(&self.best_atom_scores)
    }

    pub fn best_worst(&self) -> f64 {
        Aggregate::Worst.of(&self.best_atom_scores)
    }

    pub fn test_mean(&self) -> Option<f64> {
        self.test_atom_scores.as_deref().map(|s| Aggregate::Mean.of(s))
    }

    pub fn test_worst(&self) -> Option<f64> {
        self.test_atom_scores.as_deref().map(|s| Aggregate::Worst.of(s))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub rounds: Vec<RoundRecord>,
    pub history: History,
    pub best_instruction: Instruction,
    /// Wall-clock seconds per round (kept out of persisted records so that
    /// replays compare bit-exactly).
    pub round_seconds: Vec<f64>,
}

/// Receives rounds as they complete, so a failing run still leaves a
/// partial trace behind.
pub trait RoundSink {
    fn round(&mut self, record: &RoundRecord) -> Result<()>;
}

impl RoundSink for () {
    fn round(&mut self, _: &RoundRecord) -> Result<()> {
        Ok(())
    }
}

impl RoundSink for Vec<RoundRecord> {
    fn round(&mut self, record: &RoundRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// EMA step towards inverse scores: `target ∝ 1/(s + δ)`,
/// `w′ = (1 − α)·w + α·target`.
pub fn update_reference(w_ref: &WeightVector, atom_scores: &[f64], alpha: f64, delta: f64) -> Result<WeightVector> {
    if atom_scores.len() != w_ref.len() {
        return Err(Error::Dimension {
            context: "reference update",
            expected: w_ref.len(),
            found: atom_scores.len(),
        });
    }
    let inverse: Vec<f64> = atom_scores.iter().map(|s| 1.0 / (s + delta)).collect();
    let total: f64 = inverse.iter().sum();
    let updated = w_ref
        .as_slice()
        .iter()
        .zip(&inverse)
        .map(|(w, t)| (1.0 - alpha) * w + alpha * t / total)
        .collect();
    WeightVector::normalized(updated)
}

/// True when the budget is spent or, with a patience `P`, when the best
/// aggregate has not improved by more than the tolerance over the last `P`
/// rounds.
pub fn stop_check(best_so_far: &[f64], config: &RunConfig) -> bool {
    let m = best_so_far.len();
    if m >= config.max_steps {
        return true;
    }
    match config.patience {
        Some(p) if m > p => best_so_far[m - 1] - best_so_far[m - 1 - p] <= config.improvement_tol,
        _ => false,
    }
}

/// Atoms exposed to the adversary this round, sorted.
fn sample_atoms(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut atoms = sample(rng, n, k).into_vec();
    atoms.sort_unstable();
    atoms
}

/// Puts sub-simplex weights back into the full simplex, keeping the mass
/// the full reference assigns to the sampled atoms.
fn embed(full: &WeightVector, atoms: &[usize], sub: &WeightVector) -> Result<WeightVector> {
    if atoms.len() == full.len() {
        return Ok(sub.clone());
    }
    let mass: f64 = atoms.iter().map(|&i| full.as_slice()[i]).sum();
    let mut w = full.as_slice().to_vec();
    for (k, &i) in atoms.iter().enumerate() {
        w[i] = mass * sub.as_slice()[k];
    }
    WeightVector::normalized(w)
}

fn pick(values: &[f64], atoms: &[usize]) -> Vec<f64> {
    atoms.iter().map(|&i| values[i]).collect()
}

fn best_index(history: &History, aggregate: Aggregate) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, r) in history.records().iter().enumerate() {
        let v = aggregate.of(&r.atom_scores);
        if v > best_value {
            best_value = v;
            best = i;
        }
    }
    best
}

fn evaluate_with_retry(evaluator: &dyn Evaluator, instruction: &Instruction) -> Result<EvaluatorReport> {
    match evaluator.evaluate(instruction, ScoreMode::Validation) {
        Ok(r) => Ok(r),
        Err(_) => evaluator.evaluate(instruction, ScoreMode::Validation).map_err(|e| {
            Error::Evaluator(format!("evaluation of `{}` failed twice: {e}", instruction.text()))
        }),
    }
}

/// Per-round acquisition over the sampled atoms.
struct Acquirer<'a> {
    mode: AcquisitionMode,
    surrogate: &'a dyn AtomSurrogate,
    atoms: &'a [usize],
    w_sub: WeightVector,
    spec: AmbiguitySpec,
    beta: f64,
    mixture: Option<f64>,
    fixed_w_star: Option<WeightVector>,
    incumbent: f64,
}

impl Acquirer<'_> {
    fn predictions(&self, p: &SoftPrompt, v: &Instruction) -> Result<Vec<Prediction>> {
        let all = self.surrogate.predict_atoms(p, Some(v))?;
        Ok(self.atoms.iter().map(|&i| all[i]).collect())
    }

    /// Acquisition value used for ranking and, when available, the robust
    /// score breakdown.
    fn score(&self, p: &SoftPrompt, v: &Instruction) -> Result<(f64, Option<AcquisitionScore>)> {
        let preds = self.predictions(p, v)?;
        match self.mode {
            AcquisitionMode::NominalEi => {
                let w = self.w_sub.as_slice();
                let scalar = Prediction {
                    mean: preds.iter().zip(w).map(|(q, wi)| q.mean * wi).sum(),
                    std: preds.iter().zip(w).map(|(q, wi)| q.std * wi).sum(),
                };
                Ok((expected_improvement(scalar, self.incumbent), None))
            }
            _ => {
                let ucb = ucb_vector(&preds, self.beta);
                let s = match &self.fixed_w_star {
                    Some(w_star) => score_with_fixed_weight(&ucb, &self.w_sub, w_star)?,
                    None => robust_score(&ucb, &self.w_sub, &self.spec)?,
                };
                let value = if s.robust_value == s.nominal_value {
                    s.robust_value
                } else {
                    s.blended(self.mixture)
                };
                Ok((value, Some(s)))
            }
        }
    }
}

struct Candidate {
    prompt: SoftPrompt,
    instruction: Instruction,
    value: f64,
    score: Option<AcquisitionScore>,
}

/// Runs the optimizer against `evaluator`, reporting each round to `sink`.
pub fn run_with_sink(config: &RunConfig, evaluator: &dyn Evaluator, sink: &mut dyn RoundSink) -> Result<RunResult> {
    config.validate()?;
    let n = evaluator.n_atoms();
    if n == 0 {
        return Err(Error::Precondition("evaluator exposes no atoms".into()));
    }
    if evaluator.projected_dim() != config.d_prime {
        return Err(Error::config(
            "d_prime",
            format!("evaluator expects {}, configuration has {}", evaluator.projected_dim(), config.d_prime),
        ));
    }
    if let Some(metric) = &config.ground_metric {
        if metric.len() != n {
            return Err(Error::config("ground_metric", format!("needs {n} rows, has {}", metric.len())));
        }
    }
    let projection = ProjectionMatrix::sample(config.d, config.d_prime, &mut stream_rng(config.seed, Stream::Projection));
    let mut rng_init = stream_rng(config.seed, Stream::Init);
    let mut rng_cma = stream_rng(config.seed, Stream::Cma);
    let mut rng_atoms = stream_rng(config.seed, Stream::AtomSampling);
    let mut rng_random = stream_rng(config.seed, Stream::RandomSearch);
    let kernel = KernelConfig::from_run(config);
    let aggregate = Aggregate::for_config(config);
    let base_spec = AmbiguitySpec {
        divergence: config.divergence,
        epsilon: config.epsilon,
        ground_metric: config.ground_metric.clone(),
    };
    let zero_radius = matches!(config.acquisition_mode, AcquisitionMode::NominalUcb | AcquisitionMode::NominalEi);

    let mut history = History::new();
    let mut w_ref = WeightVector::uniform(n);
    let mut gp_weights = w_ref.clone();
    let mut rounds = Vec::new();
    let mut round_seconds = Vec::new();
    let mut best_trace = Vec::new();
    let mut calls = 0u64;
    let mut latent = Arc::new(LatentFactor::new(kernel.params));

    for m in 0..config.max_steps {
        let started = Instant::now();
        let atoms = sample_atoms(n, config.atoms_per_round, &mut rng_atoms);
        let w_sub = w_ref.restrict(&atoms);
        let epsilon = if zero_radius { 0.0 } else { config.epsilon_at(m) };
        let spec = base_spec.restrict(&atoms).with_epsilon(epsilon);
        let beta = beta_with(m, config.beta_scale, config.beta_inner);

        let random_round = m == 0 || config.acquisition_mode == AcquisitionMode::DroWithoutBo;
        let mut round_w_star = w_ref.clone();
        let chosen: Vec<Candidate> = if random_round {
            let rng = if m == 0 { &mut rng_init } else { &mut rng_random };
            (0..config.batch_size)
                .map(|_| {
                    let prompt = init_prompt(config, rng);
                    let instruction = evaluator.generate_instruction(&prompt, &projection)?;
                    Ok(Candidate {
                        prompt,
                        instruction,
                        value: f64::NAN,
                        score: None,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            let surrogate: Box<dyn AtomSurrogate> = match config.surrogate {
                SurrogateMode::PerAtom => Box::new(AtomGps::fit_cached(&history, &kernel, n, Some(&gp_weights), &mut latent)?),
                SurrogateMode::Shared => Box::new(SharedGp::fit(
                    &history,
                    &kernel,
                    n,
                    config.shared_atom_correlation,
                    Some(&gp_weights),
                )?),
            };
            let incumbent_record = &history.records()[best_index(&history, aggregate)];
            let w_sub_dot = |r: &EvalRecord| w_sub.dot(&pick(&r.atom_scores, &atoms));
            let incumbent = history.records().iter().map(w_sub_dot).fold(f64::NEG_INFINITY, f64::max);
            let mut acquirer = Acquirer {
                mode: config.acquisition_mode,
                surrogate: surrogate.as_ref(),
                atoms: &atoms,
                w_sub: w_sub.clone(),
                spec: spec.clone(),
                beta,
                mixture: config.mixture_weight,
                fixed_w_star: None,
                incumbent,
            };
            if config.w_star_mode == WStarMode::Economy && config.acquisition_mode != AcquisitionMode::NominalEi {
                let preds = acquirer.predictions(&incumbent_record.prompt, &incumbent_record.instruction)?;
                acquirer.fixed_w_star = Some(solve_inner(&ucb_vector(&preds, beta), &w_sub, &spec)?.w_star);
            }
            let candidates = search_candidates(config, evaluator, &projection, &acquirer, &incumbent_record.prompt, &mut rng_cma)?;
            let values: Vec<f64> = candidates.iter().map(|c| c.value).collect();
            let order = crate::acquisition::rank_top_k(&values, config.batch_size)?;
            let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
            let chosen: Vec<Candidate> = order.iter().map(|&i| slots[i].take().expect("unique index")).collect();
            if let Some(score) = chosen.first().and_then(|c| c.score.as_ref()) {
                round_w_star = embed(&w_ref, &atoms, &score.w_star)?;
            }
            chosen
        };

        let mut evaluations = Vec::with_capacity(chosen.len());
        let mut round_calls = 0;
        let mut batch_sum = vec![0.0; n];
        for c in chosen {
            let report = evaluate_with_retry(evaluator, &c.instruction)?;
            if report.atom_scores.len() != n {
                return Err(Error::Dimension {
                    context: "evaluator report",
                    expected: n,
                    found: report.atom_scores.len(),
                });
            }
            round_calls += report.calls_consumed;
            let iteration = history.len();
            let record = EvalRecord::new(c.prompt, c.instruction, report.atom_scores, iteration, m);
            for (acc, s) in batch_sum.iter_mut().zip(&record.atom_scores) {
                *acc += s;
            }
            evaluations.push(TraceEval {
                iteration,
                prompt: record.prompt.values().to_vec(),
                instruction: record.instruction.text().to_string(),
                atom_scores: record.atom_scores.clone(),
                acquisition: c.value.is_finite().then_some(c.value),
                nominal: c.score.as_ref().map(|s| s.nominal_value),
            });
            history.append(record)?;
        }
        calls += round_calls;

        let batch_mean: Vec<f64> = batch_sum.iter().map(|s| s / evaluations.len() as f64).collect();
        let updated_sub = update_reference(&w_sub, &pick(&batch_mean, &atoms), config.ema_rate, config.ema_delta)?;
        let record = RoundRecord {
            round: m,
            epsilon,
            beta,
            atoms: atoms.clone(),
            w_ref: w_ref.clone(),
            w_star: round_w_star.clone(),
            evaluations,
            evaluator_calls: round_calls,
            best_so_far: aggregate.of(&history.records()[best_index(&history, aggregate)].atom_scores),
        };
        w_ref = embed(&w_ref, &atoms, &updated_sub)?;
        gp_weights = round_w_star;
        best_trace.push(record.best_so_far);
        sink.round(&record)?;
        rounds.push(record);
        round_seconds.push(started.elapsed().as_secs_f64());
        if stop_check(&best_trace, config) {
            break;
        }
    }

    let best = best_index(&history, aggregate);
    let best_record = history.records()[best].clone();
    let (test_atom_scores, test_evaluator_calls) = if evaluator.supports_test() {
        let report = evaluator.evaluate(&best_record.instruction, ScoreMode::Test)?;
        (Some(report.atom_scores), report.calls_consumed)
    } else {
        (None, 0)
    };
    let effective_mode = match config.acquisition_mode {
        AcquisitionMode::Robust if config.epsilon == 0.0 => AcquisitionMode::NominalUcb,
        mode => mode,
    };
    let summary = RunSummary {
        acquisition_mode: config.acquisition_mode,
        effective_mode,
        seed: config.seed,
        rounds: rounds.len(),
        evaluations: history.len(),
        evaluator_calls: calls,
        test_evaluator_calls,
        selection: aggregate,
        best_index: best,
        best_instruction: best_record.instruction.text().to_string(),
        best_atom_scores: best_record.atom_scores.clone(),
        best_mean_index: best_index(&history, Aggregate::Mean),
        best_worst_index: best_index(&history, Aggregate::Worst),
        test_atom_scores,
        final_w_ref: w_ref,
    };
    Ok(RunResult {
        summary,
        rounds,
        best_instruction: best_record.instruction,
        history,
        round_seconds,
    })
}

pub fn run(config: &RunConfig, evaluator: &dyn Evaluator) -> Result<RunResult> {
    run_with_sink(config, evaluator, &mut ())
}

/// CMA-ES over the acquisition, started at the incumbent. Returns every
/// candidate it evaluated.
fn search_candidates(
    config: &RunConfig,
    evaluator: &dyn Evaluator,
    projection: &ProjectionMatrix,
    acquirer: &Acquirer<'_>,
    start: &SoftPrompt,
    rng: &mut impl Rng,
) -> Result<Vec<Candidate>> {
    let population = CmaParams::default_population(config.d)
        .max(config.batch_size.div_ceil(config.cma_generations))
        .max(2);
    let sigma = (config.cma_sigma * config.tau).max(f64::MIN_POSITIVE);
    let mut state = CmaState::with_population(start.values().to_vec(), sigma, config.tau, population)?;
    let mut all = Vec::with_capacity(population * config.cma_generations);
    for _ in 0..config.cma_generations {
        let xs = state.ask(rng);
        let mut fitness = Vec::with_capacity(xs.len());
        for x in &xs {
            let prompt = SoftPrompt::clamped(x.clone(), config.tau);
            let instruction = evaluator.generate_instruction(&prompt, projection)?;
            let (value, score) = acquirer.score(&prompt, &instruction)?;
            fitness.push(value);
            all.push(Candidate {
                prompt,
                instruction,
                value,
                score,
            });
        }
        state.tell(&xs, &fitness)?;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_reference_stays_uniform_for_equal_scores() {
        let w = WeightVector::uniform(3);
        let u = update_reference(&w, &[0.4, 0.4, 0.4], 0.2, 0.01).unwrap();
        for x in u.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rate_keeps_reference() {
        let w = WeightVector::new(vec![0.3, 0.7]).unwrap();
        let u = update_reference(&w, &[0.9, 0.1], 0.0, 0.01).unwrap();
        assert_eq!(u, w);
    }

    #[test]
    fn ema_golden_value() {
        // target ∝ [1/0.91, 1/0.11]; w′ = 0.5·[0.5, 0.5] + 0.5·target.
        let w = WeightVector::uniform(2);
        let u = update_reference(&w, &[0.9, 0.1], 0.5, 0.01).unwrap();
        let a = 1.0 / 0.91;
        let b = 1.0 / 0.11;
        let expected0 = 0.25 + 0.5 * a / (a + b);
        assert!((u.as_slice()[0] - expected0).abs() < 1e-15);
        assert!((u.as_slice()[0] - 0.30392156862745096).abs() < 1e-12);
    }

    #[test]
    fn stop_rules() {
        let mut c = RunConfig {
            max_steps: 10,
            patience: Some(5),
            ..RunConfig::default()
        };
        assert!(!stop_check(&[0.1, 0.2, 0.3], &c));
        assert!(stop_check(&[0.1; 10], &c));
        let flat = [0.5; 6];
        assert!(!stop_check(&flat[..5], &c));
        assert!(stop_check(&flat, &c));
        let rising: Vec<f64> = (0..9).map(|i| i as f64 * 0.01).collect();
        assert!(!stop_check(&rising, &c));
        c.patience = None;
        assert!(!stop_check(&flat, &c));
    }

    #[test]
    fn atom_sampling_is_sorted_subset() {
        let mut rng = stream_rng(3, Stream::AtomSampling);
        for _ in 0..20 {
            let a = sample_atoms(5, 2, &mut rng);
            assert_eq!(a.len(), 2);
            assert!(a[0] < a[1] && a[1] < 5);
        }
        assert_eq!(sample_atoms(2, 2, &mut rng), vec![0, 1]);
    }

    #[test]
    fn embedding_preserves_unsampled_mass() {
        let full = WeightVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let sub = WeightVector::new(vec![0.25, 0.75]).unwrap();
        let e = embed(&full, &[1, 3], &sub).unwrap();
        let v = e.as_slice();
        assert!((v[0] - 0.1).abs() < 1e-15 && (v[2] - 0.3).abs() < 1e-15);
        assert!((v[1] - 0.15).abs() < 1e-15 && (v[3] - 0.45).abs() < 1e-15);
    }
}
