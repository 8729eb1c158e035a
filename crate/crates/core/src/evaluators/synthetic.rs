//! Deterministic pseudo-LLM used to exercise the optimizer offline.
//!
//! The generator quantizes the projected prompt `z = Aᵀp` to integer levels
//! and renders one word per coordinate: the slot's stem followed by `k`
//! `+` or `-` marks (`formal+++` is level 3). The instruction text therefore
//! encodes a grid point `k·Δ`, and neighbouring prompts yield texts that
//! share most character trigrams.
//!
//! Each atom `a` has a hidden target `t_a`; the validation score of an
//! instruction decoding to `x` is `exp(−‖x − t_a‖² / D)` rounded to a
//! multiple of 1/20 (the accuracy over 20 examples). Test mode moves every
//! target by the atom's shift vector.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{calls_per_atom, Evaluator, EvaluatorReport, ScoreMode};
use crate::config::AtomMode;
use crate::error::{Error, Result};
use crate::model::{Instruction, ProjectionMatrix, SoftPrompt};

const SHIFT_SUITE: &str = include_str!("../../suites/shift.json");
const CONTROL_SUITE: &str = include_str!("../../suites/control.json");

/// Version of the suite file layout.
pub const SUITE_SCHEMA_VERSION: u32 = 1;

/// Grid used to turn projected coordinates into discrete instruction levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantizer {
    /// Grid spacing `Δ`.
    pub quantum: f64,
    /// Levels are clamped to `[−max_level, max_level]`.
    pub max_level: u32,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self {
            quantum: 0.25,
            max_level: 12,
        }
    }
}

impl Quantizer {
    pub fn level(&self, z: f64) -> i32 {
        let max = self.max_level as f64;
        let k = if z.is_finite() { (z / self.quantum).round() } else { 0.0 };
        k.clamp(-max, max) as i32
    }

    pub fn position(&self, level: i32) -> f64 {
        level as f64 * self.quantum
    }

    fn validate(&self) -> Result<()> {
        if !(self.quantum > 0.0) || !self.quantum.is_finite() {
            return Err(Error::config("quantizer.quantum", "must be > 0"));
        }
        Ok(())
    }
}

/// Instruction wording: a preamble and one stem per projected coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub preamble: String,
    pub stems: Vec<String>,
}

impl Default for Template {
    fn default() -> Self {
        Self {
            preamble: "Answer the question".into(),
            stems: ["concise", "formal", "literal", "stepwise"].map(String::from).to_vec(),
        }
    }
}

impl Template {
    pub fn render(&self, levels: &[i32]) -> String {
        let words: Vec<String> = self
            .stems
            .iter()
            .zip(levels)
            .map(|(stem, &k)| {
                let mark = if k >= 0 { "+" } else { "-" };
                format!("{stem}{}", mark.repeat(k.unsigned_abs() as usize))
            })
            .collect();
        format!("{}: {}", self.preamble, words.join(" "))
    }

    /// Inverse of [`render`](Self::render); `None` for foreign text.
    pub fn parse(&self, text: &str) -> Option<Vec<i32>> {
        let body = text.strip_prefix(&self.preamble)?.strip_prefix(": ")?;
        let words: Vec<&str> = body.split(' ').collect();
        if words.len() != self.stems.len() {
            return None;
        }
        words
            .iter()
            .zip(&self.stems)
            .map(|(word, stem)| {
                let marks = word.strip_prefix(stem.as_str())?;
                let count = marks.len() as i32;
                if marks.chars().all(|c| c == '+') {
                    Some(count)
                } else if marks.chars().all(|c| c == '-') {
                    Some(-count)
                } else {
                    None
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.stems.is_empty() {
            return Err(Error::config("template.stems", "needs at least one stem"));
        }
        for stem in &self.stems {
            if stem.is_empty() || stem.contains([' ', '+', '-']) {
                return Err(Error::config("template.stems", format!("invalid stem `{stem}`")));
            }
        }
        Ok(())
    }

    /// `g(Aᵀp)`: renders the quantized projection of `p`.
    pub fn generate(&self, p: &SoftPrompt, a: &ProjectionMatrix, quantizer: &Quantizer) -> Result<Instruction> {
        let z = a.project(p)?;
        if z.len() != self.stems.len() {
            return Err(Error::Dimension {
                context: "instruction template",
                expected: self.stems.len(),
                found: z.len(),
            });
        }
        let levels: Vec<i32> = z.iter().map(|&x| quantizer.level(x)).collect();
        Ok(Instruction::new(self.render(&levels)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAtom {
    pub name: String,
    /// Optimum of the validation score in projected space.
    pub target: Vec<f64>,
    /// Test-mode target minus validation target.
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub name: String,
    pub template: Template,
    /// Width `D` of the score bump.
    pub difficulty: f64,
    pub atoms: Vec<SyntheticAtom>,
}

impl SyntheticTask {
    pub fn dim(&self) -> usize {
        self.template.stems.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        if !(self.difficulty > 0.0) || !self.difficulty.is_finite() {
            return Err(Error::config("difficulty", format!("task `{}`: must be > 0", self.name)));
        }
        if self.atoms.is_empty() {
            return Err(Error::config("atoms", format!("task `{}` has no atoms", self.name)));
        }
        for atom in &self.atoms {
            if atom.target.len() != self.dim() || atom.shift.len() != self.dim() {
                return Err(Error::Dimension {
                    context: "synthetic atom",
                    expected: self.dim(),
                    found: atom.target.len().min(atom.shift.len()),
                });
            }
        }
        Ok(())
    }

    /// Decoded grid position of an instruction of this task.
    pub fn decode(&self, instruction: &Instruction, quantizer: &Quantizer) -> Option<Vec<f64>> {
        self.template
            .parse(instruction.text())
            .map(|levels| levels.into_iter().map(|k| quantizer.position(k)).collect())
    }

    /// Continuous (undiscretized) score of a position.
    pub fn raw_score(&self, position: &[f64], atom: usize, mode: ScoreMode) -> f64 {
        let a = &self.atoms[atom];
        let sq: f64 = position
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let t = match mode {
                    ScoreMode::Validation => a.target[i],
                    ScoreMode::Test => a.target[i] + a.shift[i],
                };
                (x - t).powi(2)
            })
            .sum();
        (-sq / self.difficulty).exp()
    }

    /// Random task whose two atoms pull in opposite directions.
    ///
    /// The targets sit `L` apart with `L²/D ∈ [3.5, 4.5]`, so the point that
    /// maximises the mean score is near one target while the point that
    /// maximises the worst atom lies between them. With `shifted`, every
    /// atom also receives a non-zero grid-aligned test shift; otherwise both
    /// atoms share one target and there is no shift.
    pub fn random(name: &str, seed: u64, dim: usize, quantizer: &Quantizer, shifted: bool) -> Self {
        let mut rng = crate::model::stream_rng(seed, crate::model::Stream::Evaluator);
        let q = quantizer.quantum;
        let snap = |x: f64| (x / q).round() * q;
        let difficulty = 2.0 + rng.random::<f64>();
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-2..=2) as f64 * q).collect();
        let stems = ["concise", "formal", "literal", "stepwise", "polite", "detailed", "direct", "neutral"];
        let template = Template {
            preamble: format!("Solve the {name} task"),
            stems: (0..dim).map(|i| stems[i % stems.len()].to_string()).collect(),
        };
        let atoms = if shifted {
            let mut u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let half = 0.5 * ((3.5 + rng.random::<f64>()) * difficulty).sqrt();
            (0..2)
                .map(|a| {
                    let sign = if a == 0 { 1.0 } else { -1.0 };
                    let target = center.iter().zip(&u).map(|(c, d)| snap(c + sign * half * d)).collect();
                    let shift = loop {
                        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-1..=1) as f64 * q).collect();
                        if s.iter().any(|x| *x != 0.0) {
                            break s;
                        }
                    };
                    SyntheticAtom {
                        name: format!("atom{a}"),
                        target,
                        shift,
                    }
                })
                .collect()
        } else {
            (0..2)
                .map(|a| SyntheticAtom {
                    name: format!("atom{a}"),
                    target: center.clone(),
                    shift: vec![0.0; dim],
                })
                .collect()
        };
        Self {
            name: name.to_string(),
            template,
            difficulty,
            atoms,
        }
    }
}

/// A versioned collection of synthetic tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSuite {
    pub schema_version: u32,
    pub name: String,
    pub quantizer: Quantizer,
    /// Validation examples behind every atom score.
    pub examples_per_atom: usize,
    pub tasks: Vec<SyntheticTask>,
}

impl SyntheticSuite {
    pub fn from_json(text: &str) -> Result<Self> {
        let suite: SyntheticSuite =
            serde_json::from_str(text).map_err(|e| Error::parse("synthetic suite", e))?;
        if suite.schema_version != SUITE_SCHEMA_VERSION {
            return Err(Error::parse(
                "synthetic suite",
                format!("schema version {} (expected {SUITE_SCHEMA_VERSION})", suite.schema_version),
            ));
        }
        suite.quantizer.validate()?;
        if suite.examples_per_atom == 0 {
            return Err(Error::config("examples_per_atom", "must be >= 1"));
        }
        for task in &suite.tasks {
            task.validate()?;
        }
        Ok(suite)
    }

    /// Bundled suite by name (`shift`, `control`) or a JSON file path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "shift" => Self::from_json(SHIFT_SUITE),
            "control" => Self::from_json(CONTROL_SUITE),
            path => {
                let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::io(path, e))?;
                Self::from_json(&text)
            }
        }
    }

    /// Generates a suite of `n_tasks` random tasks.
    pub fn generate(name: &str, n_tasks: usize, seed: u64, dim: usize, shifted: bool) -> Self {
        let quantizer = Quantizer::default();
        let tasks = (0..n_tasks)
            .map(|i| {
                let task_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
                SyntheticTask::random(&format!("{name}-{i}"), task_seed, dim, &quantizer, shifted)
            })
            .collect();
        Self {
            schema_version: SUITE_SCHEMA_VERSION,
            name: name.to_string(),
            quantizer,
            examples_per_atom: 20,
            tasks,
        }
    }

    pub fn task(&self, index: usize) -> Result<&SyntheticTask> {
        self.tasks.get(index).ok_or_else(|| {
            Error::config("task", format!("suite `{}` has {} tasks, asked for {index}", self.name, self.tasks.len()))
        })
    }
}

/// One synthetic task exposed as an [`Evaluator`].
///
/// In per-task mode the atoms are the task's atoms. In per-example mode every
/// task atom expands into `examples_per_atom` 0–1 atoms; example `j` is
/// answered correctly when the continuous score reaches `(j + 0.5)/n`, so the
/// example average reproduces the per-task score.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    task: SyntheticTask,
    quantizer: Quantizer,
    examples: usize,
    atom_mode: AtomMode,
}

impl SyntheticEvaluator {
    pub fn new(task: SyntheticTask, quantizer: Quantizer, examples: usize, atom_mode: AtomMode) -> Result<Self> {
        task.validate()?;
        quantizer.validate()?;
        if examples == 0 {
            return Err(Error::config("examples_per_atom", "must be >= 1"));
        }
        Ok(Self {
            task,
            quantizer,
            examples,
            atom_mode,
        })
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    /// Score of `instruction` on task atom `atom`, a multiple of `1/examples`.
    pub fn score(&self, instruction: &Instruction, atom: usize, mode: ScoreMode) -> Result<f64> {
        if atom >= self.task.atoms.len() {
            return Err(Error::Precondition(format!(
                "atom {atom} out of range for {} atoms",
                self.task.atoms.len()
            )));
        }
        Ok(match self.task.decode(instruction, &self.quantizer) {
            None => 0.0,
            Some(x) => {
                let n = self.examples as f64;
                correct_examples(self.task.raw_score(&x, atom, mode), self.examples) as f64 / n
            }
        })
    }
}

/// Number of examples answered correctly at continuous score `s`.
fn correct_examples(s: f64, examples: usize) -> usize {
    ((s * examples as f64 + 0.5).floor() as usize).min(examples)
}

impl Evaluator for SyntheticEvaluator {
    fn n_atoms(&self) -> usize {
        match self.atom_mode {
            AtomMode::PerTask => self.task.atoms.len(),
            AtomMode::PerExample => self.task.atoms.len() * self.examples,
        }
    }

    fn projected_dim(&self) -> usize {
        self.task.dim()
    }

    fn generate_instruction(&self, p: &SoftPrompt, a: &ProjectionMatrix) -> Result<Instruction> {
        self.task.template.generate(p, a, &self.quantizer)
    }

    fn evaluate(&self, instruction: &Instruction, mode: ScoreMode) -> Result<EvaluatorReport> {
        let per_task = (0..self.task.atoms.len())
            .map(|a| self.score(instruction, a, mode))
            .collect::<Result<Vec<f64>>>()?;
        let atom_scores = match self.atom_mode {
            AtomMode::PerTask => per_task,
            AtomMode::PerExample => per_task
                .iter()
                .flat_map(|s| {
                    let correct = (s * self.examples as f64).round() as usize;
                    (0..self.examples).map(move |j| if j < correct { 1.0 } else { 0.0 })
                })
                .collect(),
        };
        Ok(EvaluatorReport {
            instruction: instruction.clone(),
            atom_scores,
            calls_consumed: self.task.atoms.len() as u64 * calls_per_atom(self.atom_mode, self.examples),
            flagged: Vec::new(),
        })
    }

    fn supports_test(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(rows: usize, cols: usize) -> ProjectionMatrix {
        let mut e = vec![0.0; rows * cols];
        for i in 0..rows.min(cols) {
            e[i * cols + i] = 1.0;
        }
        ProjectionMatrix::from_row_major(rows, cols, e).unwrap()
    }

    fn task() -> SyntheticTask {
        SyntheticTask {
            name: "t".into(),
            template: Template::default(),
            difficulty: 1.0,
            atoms: vec![SyntheticAtom {
                name: "a".into(),
                target: vec![0.5, -0.25, 0.0, 1.0],
                shift: vec![0.25, 0.0, 0.0, 0.0],
            }],
        }
    }

    #[test]
    fn zero_prompt_renders_default_template() {
        let p = SoftPrompt::new(vec![0.0; 4], 1.0).unwrap();
        let v = Template::default().generate(&p, &identity(4, 4), &Quantizer::default()).unwrap();
        assert_eq!(v.text(), "Answer the question: concise formal literal stepwise");
    }

    #[test]
    fn render_parse_round_trip() {
        let t = Template::default();
        let levels = vec![3, -2, 0, 12];
        let text = t.render(&levels);
        assert_eq!(text, "Answer the question: concise+++ formal-- literal stepwise++++++++++++");
        assert_eq!(t.parse(&text), Some(levels));
        assert_eq!(t.parse("something else"), None);
        assert_eq!(t.parse("Answer the question: concise+- formal literal stepwise"), None);
    }

    #[test]
    fn sub_quantum_perturbation_keeps_instruction() {
        let a = identity(4, 4);
        let q = Quantizer::default();
        let p = SoftPrompt::new(vec![0.3, -0.1, 0.2, 0.05], 1.0).unwrap();
        let mut shifted = p.values().to_vec();
        shifted[0] += 1e-9;
        let p2 = SoftPrompt::new(shifted, 1.0).unwrap();
        let t = Template::default();
        assert_eq!(t.generate(&p, &a, &q).unwrap(), t.generate(&p2, &a, &q).unwrap());
    }

    #[test]
    fn target_scores_one_and_needle_scores_zero() {
        let ev = SyntheticEvaluator::new(task(), Quantizer::default(), 20, AtomMode::PerTask).unwrap();
        let at_target = Instruction::new(Template::default().render(&[2, -1, 0, 4]));
        assert_eq!(ev.score(&at_target, 0, ScoreMode::Validation).unwrap(), 1.0);
        let at_test = Instruction::new(Template::default().render(&[3, -1, 0, 4]));
        assert_eq!(ev.score(&at_test, 0, ScoreMode::Test).unwrap(), 1.0);
        assert!(ev.score(&at_target, 0, ScoreMode::Test).unwrap() < 1.0);

        let mut needle = task();
        needle.difficulty = 1e-300;
        let ev = SyntheticEvaluator::new(needle, Quantizer::default(), 20, AtomMode::PerTask).unwrap();
        let off = Instruction::new(Template::default().render(&[2, -1, 0, 3]));
        assert_eq!(ev.score(&off, 0, ScoreMode::Validation).unwrap(), 0.0);
    }

    #[test]
    fn foreign_text_scores_zero() {
        let ev = SyntheticEvaluator::new(task(), Quantizer::default(), 20, AtomMode::PerTask).unwrap();
        assert_eq!(ev.score(&Instruction::new("hello"), 0, ScoreMode::Validation).unwrap(), 0.0);
        assert!(ev.score(&Instruction::new("hello"), 1, ScoreMode::Validation).is_err());
    }

    #[test]
    fn per_example_mode_expands_atoms() {
        let ev = SyntheticEvaluator::new(task(), Quantizer::default(), 20, AtomMode::PerExample).unwrap();
        assert_eq!(ev.n_atoms(), 20);
        let v = Instruction::new(Template::default().render(&[2, -1, 0, 3]));
        let report = ev.evaluate(&v, ScoreMode::Validation).unwrap();
        assert_eq!(report.calls_consumed, 20);
        let mean = report.atom_scores.iter().sum::<f64>() / 20.0;
        assert_eq!(mean, ev.score(&v, 0, ScoreMode::Validation).unwrap());
        let per_task = SyntheticEvaluator::new(task(), Quantizer::default(), 20, AtomMode::PerTask).unwrap();
        assert_eq!(per_task.evaluate(&v, ScoreMode::Validation).unwrap().calls_consumed, 1);
    }

    #[test]
    fn bundled_suites_load() {
        for name in ["shift", "control"] {
            let suite = SyntheticSuite::load(name).unwrap();
            assert_eq!(suite.tasks.len(), 10);
            for t in &suite.tasks {
                assert_eq!(t.atoms.len(), 2);
                assert_eq!(t.dim(), 4);
            }
        }
    }

    #[test]
    fn bundled_suites_match_generator() {
        assert_eq!(SyntheticSuite::load("shift").unwrap(), SyntheticSuite::generate("shift", 10, 1, 4, true));
        assert_eq!(SyntheticSuite::load("control").unwrap(), SyntheticSuite::generate("control", 10, 2, 4, false));
    }

    #[test]
    fn suite_schema_version_is_checked() {
        let mut suite = SyntheticSuite::generate("x", 1, 0, 2, true);
        suite.schema_version = 99;
        let text = serde_json::to_string(&suite).unwrap();
        assert!(SyntheticSuite::from_json(&text).is_err());
    }
}
