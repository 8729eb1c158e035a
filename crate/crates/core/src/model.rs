//! Domain types shared by every stage of the optimizer: soft prompts, the
//! frozen random projection, instructions with their similarity features,
//! evaluation records and the append-only history, and probability vectors
//! over ambiguity atoms.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Number of hash buckets in an instruction feature vector.
pub const FEATURE_BUCKETS: usize = 256;

/// Tolerance used when checking that a weight vector sums to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point in the low-dimensional latent space searched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    values: Vec<f64>,
    bound: f64,
}

impl SoftPrompt {
    /// Builds a prompt, rejecting coordinates outside `[-bound, bound]`.
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::config("tau", format!("bound must be finite and >= 0, got {bound}")));
        }
        if let Some(c) = values.iter().find(|c| !c.is_finite() || c.abs() > bound) {
            return Err(Error::Invariant(format!(
                "soft prompt coordinate {c} outside [-{bound}, {bound}]"
            )));
        }
        Ok(Self { values, bound })
    }

    /// Builds a prompt by clamping every coordinate into `[-bound, bound]`.
    /// Non-finite coordinates are mapped to zero.
    pub fn clamped(values: Vec<f64>, bound: f64) -> Self {
        let values = values
            .into_iter()
            .map(|c| if c.is_finite() { c.clamp(-bound, bound) } else { 0.0 })
            .collect();
        Self { values, bound }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn squared_distance(&self, other: &SoftPrompt) -> f64 {
        squared_distance(&self.values, &other.values)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Draws a prompt with i.i.d. `Uniform(-tau, tau)` coordinates.
pub fn init_prompt(config: &RunConfig, rng: &mut impl Rng) -> SoftPrompt {
    let tau = config.tau;
    let values = (0..config.d)
        .map(|_| if tau > 0.0 { rng.random_range(-tau..=tau) } else { 0.0 })
        .collect();
    SoftPrompt { values, bound: tau }
}

/// Random projection `A` stored as `d x d'`; projecting computes `Aᵀp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    entries: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn from_row_major(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Dimension {
                context: "projection matrix entries",
                expected: rows * cols,
                found: entries.len(),
            });
        }
        Ok(Self { rows, cols, entries })
    }

    /// Samples entries from `Uniform[-1, 1]`; the matrix stays frozen for the run.
    pub fn sample(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let entries = (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { rows, cols, entries }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.entries)
    }

    /// Returns `Aᵀp`, a vector of length `d'`.
    pub fn project(&self, prompt: &SoftPrompt) -> Result<Vec<f64>> {
        if prompt.dim() != self.rows {
            return Err(Error::Dimension {
                context: "project_prompt",
                expected: self.rows,
                found: prompt.dim(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, p) in prompt.values().iter().enumerate() {
            let row = &self.entries[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * p;
            }
        }
        Ok(out)
    }
}

/// A human-readable instruction together with its similarity feature.
///
/// The feature is a pure function of the text: lower-cased character
/// trigrams hashed into [`FEATURE_BUCKETS`] buckets and L2-normalised.
/// Empty text maps to the zero vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "InstructionText", into = "InstructionText")]
pub struct Instruction {
    text: String,
    feature: Vec<f64>,
    support: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
struct InstructionText {
    text: String,
}

impl From<InstructionText> for Instruction {
    fn from(value: InstructionText) -> Self {
        Instruction::new(value.text)
    }
}

impl From<Instruction> for InstructionText {
    fn from(value: Instruction) -> Self {
        InstructionText { text: value.text }
    }
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Instruction {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let feature = instruction_feature(&text);
        let support = feature
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i as u16)
            .collect();
        Self {
            text,
            feature,
            support,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn feature(&self) -> &[f64] {
        &self.feature
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Indices of the non-zero feature buckets, ascending.
    pub fn support(&self) -> &[u16] {
        &self.support
    }

    /// Inner product of the two feature vectors.
    pub fn feature_dot(&self, other: &Instruction) -> f64 {
        let (short, long) = if self.support.len() <= other.support.len() {
            (self, other)
        } else {
            (other, self)
        };
        short
            .support
            .iter()
            .map(|&i| short.feature[i as usize] * long.feature[i as usize])
            .sum()
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed character-trigram feature of `text`.
pub fn instruction_feature(text: &str) -> Vec<f64> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut feature = vec![0.0; FEATURE_BUCKETS];
    if chars.is_empty() {
        return feature;
    }
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        feature[(fnv1a(s.as_bytes()) % FEATURE_BUCKETS as u64) as usize] += 1.0;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        chars.windows(3).for_each(&mut add);
    }
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    feature.iter_mut().for_each(|v| *v /= norm);
    feature
}

/// Probability mass over ambiguity atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(value: Vec<f64>) -> Result<Self> {
        WeightVector::new(value)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(value: WeightVector) -> Self {
        value.0
    }
}

impl WeightVector {
    /// Validates non-negativity and unit mass (within [`SIMPLEX_TOL`]).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Invariant("weight vector must be non-empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invariant(format!("weights must be finite and >= 0: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invariant(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self(weights))
    }

    /// Normalises a non-negative vector with positive mass onto the simplex.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invariant(format!("cannot normalise {weights:?}")));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Restriction to `atoms`, renormalised. Falls back to uniform over the
    /// subset when it carries no mass.
    pub fn restrict(&self, atoms: &[usize]) -> Self {
        let sub: Vec<f64> = atoms.iter().map(|&a| self.0[a]).collect();
        WeightVector::normalized(sub).unwrap_or_else(|_| WeightVector::uniform(atoms.len()))
    }
}

/// One evaluated prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt: SoftPrompt,
    pub instruction: Instruction,
    /// Score per ambiguity atom, each in `[0, 1]`.
    pub atom_scores: Vec<f64>,
    /// Position in the history; strictly increasing.
    pub iteration: usize,
    /// Outer optimization round that produced the record.
    pub round: usize,
}

impl EvalRecord {
    /// Builds a record, clamping scores into `[0, 1]`.
    pub fn new(
        prompt: SoftPrompt,
        instruction: Instruction,
        atom_scores: Vec<f64>,
        iteration: usize,
        round: usize,
    ) -> Self {
        let atom_scores = atom_scores
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) })
            .collect();
        Self {
            prompt,
            instruction,
            atom_scores,
            iteration,
            round,
        }
    }

    pub fn mean_score(&self) -> f64 {
        self.atom_scores.iter().sum::<f64>() / self.atom_scores.len() as f64
    }

    pub fn worst_score(&self) -> f64 {
        self.atom_scores.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Append-only evaluation history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    records: Vec<EvalRecord>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `record`, which must carry `iteration == self.len()` and the
    /// same atom count as earlier records.
    pub fn append(&mut self, record: EvalRecord) -> Result<()> {
        if record.iteration != self.records.len() {
            return Err(Error::Invariant(format!(
                "record iteration {} appended to history of length {}",
                record.iteration,
                self.records.len()
            )));
        }
        if let Some(first) = self.records.first() {
            if first.atom_scores.len() != record.atom_scores.len() {
                return Err(Error::Dimension {
                    context: "atom scores",
                    expected: first.atom_scores.len(),
                    found: record.atom_scores.len(),
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_atoms(&self) -> Option<usize> {
        self.records.first().map(|r| r.atom_scores.len())
    }
}

/// Independent deterministic random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Projection = 1,
    Init = 2,
    Cma = 3,
    AtomSampling = 4,
    RandomSearch = 5,
    Evaluator = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
