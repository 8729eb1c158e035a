//! Covariance functions over (soft prompt, instruction) pairs.
//!
//! Two forms are available:
//!
//! * **coupled**: `k = λ·l(p_i, p_j) + (1 − λ)·s(v_i, v_j)`;
//! * **sandwich**: `k(x, y) = l(P, x)ᵀ L⁻¹ S′ L⁻¹ l(P, y)` where `P` are the
//!   training prompts, `L` their latent Gram matrix and `S′` the
//!   instruction Gram matrix, optionally re-weighted by an adversarial
//!   distribution over atoms. On the training prompts this reduces to `S′`.
//!
//! `l` is a squared-exponential kernel on prompts and `s` maps the cosine of
//! hashed trigram features into `[0, 1]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{squared_distance, History, Instruction, SoftPrompt, WeightVector};

/// Largest diagonal jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelForm {
    Sandwich,
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub lambda: f64,
    pub jitter: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lengthscale: 1.0,
            signal_variance: 1.0,
            lambda: 0.5,
            jitter: 1e-6,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) {
            return Err(Error::config("lengthscale", "must be > 0"));
        }
        if !(self.signal_variance > 0.0) {
            return Err(Error::config("signal_variance", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::config("jitter", "must be >= 0"));
        }
        Ok(())
    }
}

/// Squared-exponential kernel `σ_f²·exp(−‖p_i − p_j‖² / (2ℓ²))`.
pub fn latent_kernel(p_i: &SoftPrompt, p_j: &SoftPrompt, params: &KernelParams) -> f64 {
    latent_from_sq_dist(p_i.squared_distance(p_j), params)
}

fn latent_from_sq_dist(sq: f64, params: &KernelParams) -> f64 {
    params.signal_variance * (-sq / (2.0 * params.lengthscale * params.lengthscale)).exp()
}

/// `(1 + cos) / 2` of the instruction features; two empty instructions are
/// identical (1) and an empty instruction is orthogonal to any other (0.5).
pub fn instruction_similarity(v_i: &Instruction, v_j: &Instruction) -> f64 {
    match (v_i.is_empty(), v_j.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.5,
        (false, false) => {
            if v_i.text() == v_j.text() {
                1.0
            } else {
                (0.5 * (1.0 + v_i.feature_dot(v_j))).clamp(0.0, 1.0)
            }
        }
    }
}

pub fn coupled_kernel(
    p_i: &SoftPrompt,
    v_i: &Instruction,
    p_j: &SoftPrompt,
    v_j: &Instruction,
    params: &KernelParams,
) -> f64 {
    let l = latent_kernel(p_i, p_j, params);
    let s = instruction_similarity(v_i, v_j);
    params.lambda * l + (1.0 - params.lambda) * s
}

pub fn latent_gram(prompts: &[&SoftPrompt], params: &KernelParams) -> DMatrix<f64> {
    let m = prompts.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        gram[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = latent_kernel(prompts[i], prompts[j], params);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

pub fn instruction_gram(instructions: &[&Instruction]) -> DMatrix<f64> {
    let m = instructions.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        gram[(i, i)] = 1.0;
        for j in 0..i {
            let v = instruction_similarity(instructions[i], instructions[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

/// Atom that contributes most to record `i`'s weighted score, ties to the
/// smaller index.
pub fn dominant_atom(atom_scores: &[f64], weights: &WeightVector) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (a, (s, w)) in atom_scores.iter().zip(weights.as_slice()).enumerate() {
        let v = s * w;
        if v > best_val {
            best_val = v;
            best = a;
        }
    }
    best
}

/// Re-weights the instruction Gram: `S′_ij = n·sqrt(w_a(i)·w_a(j))·S_ij`.
///
/// The factor `n` makes the uniform distribution a no-op; a uniform `w`
/// returns `gram` untouched.
pub fn weight_instruction_gram(
    gram: &DMatrix<f64>,
    history: &History,
    weights: &WeightVector,
) -> Result<DMatrix<f64>> {
    let Some(scale) = instruction_scales(history, weights)? else {
        return Ok(gram.clone());
    };
    let mut out = gram.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] *= scale[i] * scale[j];
        }
    }
    Ok(out)
}

/// Per-record factors `sqrt(n·w_a(i))` of the instruction re-weighting, or
/// `None` when `w` is uniform.
pub(crate) fn instruction_scales(history: &History, weights: &WeightVector) -> Result<Option<Vec<f64>>> {
    let n = weights.len();
    if history.n_atoms().is_some_and(|k| k != n) {
        return Err(Error::Dimension {
            context: "instruction weighting",
            expected: history.n_atoms().unwrap_or(0),
            found: n,
        });
    }
    let w = weights.as_slice();
    if w.iter().all(|x| *x == w[0]) {
        return Ok(None);
    }
    Ok(Some(
        history
            .records()
            .iter()
            .map(|r| (n as f64 * w[dominant_atom(&r.atom_scores, weights)]).sqrt())
            .collect(),
    ))
}

/// Cholesky factor of `matrix + jitter·I`, escalating the jitter by ×10 up to
/// [`MAX_JITTER`]. Returns the factor and the jitter that succeeded.
pub fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    base_jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = base_jitter;
    loop {
        let mut shifted = matrix.clone();
        if jitter > 0.0 {
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok((chol, jitter));
        }
        if jitter >= MAX_JITTER {
            let min_diag = (0..matrix.nrows())
                .map(|i| matrix[(i, i)])
                .fold(f64::INFINITY, f64::min);
            return Err(Error::Numerical(format!(
                "matrix of size {} not positive definite after jitter {jitter:e} (min diagonal {min_diag:e})",
                matrix.nrows()
            )));
        }
        jitter = if jitter == 0.0 { 1e-12 } else { (jitter * 10.0).min(MAX_JITTER) };
    }
}

/// Dense sandwich Gram on the training prompts, `Lᵀ L̃⁻¹ S′ L̃⁻¹ L`, where `L̃`
/// is the jittered latent Gram.
pub fn sandwich_kernel_matrix(
    history: &History,
    params: &KernelParams,
    weights: Option<&WeightVector>,
) -> Result<DMatrix<f64>> {
    if history.is_empty() {
        return Err(Error::Precondition("sandwich kernel needs at least one record".into()));
    }
    let prompts: Vec<&SoftPrompt> = history.records().iter().map(|r| &r.prompt).collect();
    let instructions: Vec<&Instruction> =
        history.records().iter().map(|r| &r.instruction).collect();
    let latent = latent_gram(&prompts, params);
    let mut s = instruction_gram(&instructions);
    if let Some(w) = weights {
        s = weight_instruction_gram(&s, history, w)?;
    }
    let (chol, _) = cholesky_with_jitter(&latent, params.jitter)?;
    let right = chol.solve(&latent); // L̃⁻¹ L
    let mut k = right.transpose() * s * right;
    symmetrize(&mut k);
    Ok(k)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// A kernel bound to a set of training inputs, able to produce the training
/// Gram matrix and the cross-covariances of new queries.
#[derive(Debug, Clone)]
pub struct BoundKernel {
    params: KernelParams,
    prompts: Vec<SoftPrompt>,
    instructions: Vec<Instruction>,
    form: BoundForm,
}

#[derive(Debug, Clone)]
enum BoundForm {
    Coupled,
    Sandwich {
        latent_chol: Option<Cholesky<f64, Dyn>>,
        weighted_s: DMatrix<f64>,
    },
}

impl BoundKernel {
    pub fn bind(
        form: KernelForm,
        params: KernelParams,
        history: &History,
        weights: Option<&WeightVector>,
    ) -> Result<Self> {
        params.validate()?;
        let prompts: Vec<SoftPrompt> = history.records().iter().map(|r| r.prompt.clone()).collect();
        let instructions: Vec<Instruction> =
            history.records().iter().map(|r| r.instruction.clone()).collect();
        let form = match form {
            KernelForm::Coupled => BoundForm::Coupled,
            KernelForm::Sandwich => {
                let prompt_refs: Vec<&SoftPrompt> = prompts.iter().collect();
                let instr_refs: Vec<&Instruction> = instructions.iter().collect();
                let mut s = instruction_gram(&instr_refs);
                if let Some(w) = weights {
                    s = weight_instruction_gram(&s, history, w)?;
                }
                let latent_chol = if prompts.is_empty() {
                    None
                } else {
                    let latent = latent_gram(&prompt_refs, &params);
                    Some(cholesky_with_jitter(&latent, params.jitter)?.0)
                };
                BoundForm::Sandwich {
                    latent_chol,
                    weighted_s: s,
                }
            }
        };
        Ok(Self {
            params,
            prompts,
            instructions,
            form,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Covariance among the training inputs (no noise, no jitter).
    pub fn training_gram(&self) -> DMatrix<f64> {
        match &self.form {
            BoundForm::Coupled => {
                let prompts: Vec<&SoftPrompt> = self.prompts.iter().collect();
                let instr: Vec<&Instruction> = self.instructions.iter().collect();
                let lambda = self.params.lambda;
                latent_gram(&prompts, &self.params) * lambda
                    + instruction_gram(&instr) * (1.0 - lambda)
            }
            BoundForm::Sandwich { weighted_s, .. } => weighted_s.clone(),
        }
    }

    fn latent_column(&self, p: &SoftPrompt) -> DVector<f64> {
        DVector::from_iterator(
            self.prompts.len(),
            self.prompts
                .iter()
                .map(|q| latent_from_sq_dist(squared_distance(q.values(), p.values()), &self.params)),
        )
    }

    /// Cross-covariance with the training inputs and the prior variance at
    /// the query.
    pub fn cross(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<(DVector<f64>, f64)> {
        if let Some(first) = self.prompts.first() {
            if first.dim() != p.dim() {
                return Err(Error::Dimension {
                    context: "kernel query",
                    expected: first.dim(),
                    found: p.dim(),
                });
            }
        }
        match &self.form {
            BoundForm::Coupled => {
                let v = v.ok_or_else(|| {
                    Error::Precondition("coupled kernel needs the query instruction".into())
                })?;
                let lambda = self.params.lambda;
                let mut k = self.latent_column(p) * lambda;
                for (kv, vi) in k.iter_mut().zip(&self.instructions) {
                    *kv += (1.0 - lambda) * instruction_similarity(vi, v);
                }
                Ok((k, lambda * self.params.signal_variance + (1.0 - lambda)))
            }
            BoundForm::Sandwich {
                latent_chol,
                weighted_s,
            } => match latent_chol {
                None => Ok((DVector::zeros(0), self.params.signal_variance)),
                Some(chol) => {
                    let phi = chol.solve(&self.latent_column(p));
                    let k = weighted_s * &phi;
                    let kss = phi.dot(&k).max(0.0);
                    Ok((k, kss))
                }
            },
        }
    }

    /// Kernel value between two arbitrary queries.
    pub fn eval(
        &self,
        a: (&SoftPrompt, Option<&Instruction>),
        b: (&SoftPrompt, Option<&Instruction>),
    ) -> Result<f64> {
        match &self.form {
            BoundForm::Coupled => {
                let (va, vb) = match (a.1, b.1) {
                    (Some(x), Some(y)) => (x, y),
                    _ => {
                        return Err(Error::Precondition(
                            "coupled kernel needs both instructions".into(),
                        ))
                    }
                };
                Ok(coupled_kernel(a.0, va, b.0, vb, &self.params))
            }
            BoundForm::Sandwich {
                latent_chol,
                weighted_s,
            } => match latent_chol {
                None => Ok(latent_kernel(a.0, b.0, &self.params)),
                Some(chol) => {
                    let pa = chol.solve(&self.latent_column(a.0));
                    let pb = chol.solve(&self.latent_column(b.0));
                    Ok(pa.dot(&(weighted_s * pb)))
                }
            },
        }
    }
}
