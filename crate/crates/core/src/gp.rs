//! Gaussian-process surrogates over soft-prompt space.
//!
//! The default surrogate fits one GP per ambiguity atom. All atoms share the
//! same inputs and kernel, so they share one Cholesky factor and differ only
//! in their weight vectors `α = (K + σ_n² I)⁻¹ y`. [`SharedGp`] is the
//! alternative single GP whose inputs are (prompt, atom) pairs.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cholesky_with_jitter, instruction_scales, latent_gram, latent_kernel, BoundKernel, KernelForm, KernelParams};
use crate::model::{History, Instruction, SoftPrompt, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub form: KernelForm,
    pub params: KernelParams,
    pub noise_variance: f64,
}

impl KernelConfig {
    pub fn from_run(config: &crate::config::RunConfig) -> Self {
        Self {
            form: config.kernel,
            params: KernelParams {
                lengthscale: config.lengthscale,
                signal_variance: config.signal_variance,
                lambda: config.lambda,
                jitter: config.jitter,
            },
            noise_variance: config.noise_variance,
        }
    }
}

/// Posterior mean and standard deviation at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

/// Factorized training covariance shared by the per-atom posteriors.
#[derive(Debug)]
struct Factor {
    kernel: BoundKernel,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl Factor {
    fn new(kernel: BoundKernel, noise_variance: f64) -> Result<Self> {
        if kernel.is_empty() {
            return Ok(Self { kernel, chol: None });
        }
        let mut gram = kernel.training_gram();
        for i in 0..gram.nrows() {
            gram[(i, i)] += noise_variance;
        }
        let (chol, _) = cholesky_with_jitter(&gram, kernel.params().jitter)?;
        Ok(Self {
            kernel,
            chol: Some(chol),
        })
    }

    /// Cross-covariance and posterior variance at a query.
    fn variance(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<(DVector<f64>, f64)> {
        let (k, kss) = self.kernel.cross(p, v)?;
        let var = match &self.chol {
            None => kss,
            Some(chol) => {
                let mut w = k.clone();
                chol.l_dirty().solve_lower_triangular_mut(&mut w);
                kss - w.norm_squared()
            }
        };
        Ok((k, var.max(0.0)))
    }

    fn alpha(&self, targets: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(0),
            Some(chol) => chol.solve(targets),
        }
    }
}

/// Posterior of a single atom's GP.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    factor: Arc<Factor>,
    alpha: DVector<f64>,
}

impl GpPosterior {
    pub fn predict(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<Prediction> {
        let (k, var) = self.factor.variance(p, v)?;
        let mean = if k.is_empty() { 0.0 } else { k.dot(&self.alpha) };
        Ok(Prediction {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn training_size(&self) -> usize {
        self.factor.kernel.len()
    }
}

fn atom_targets(history: &History, atom: usize) -> Result<DVector<f64>> {
    if let Some(n) = history.n_atoms() {
        if atom >= n {
            return Err(Error::Precondition(format!("atom {atom} out of range for {n} atoms")));
        }
    }
    Ok(DVector::from_iterator(
        history.len(),
        history.records().iter().map(|r| r.atom_scores[atom]),
    ))
}

/// Fits the GP of one atom. An empty history yields the prior.
pub fn fit(
    history: &History,
    config: &KernelConfig,
    atom_index: usize,
    weights: Option<&WeightVector>,
) -> Result<GpPosterior> {
    let kernel = BoundKernel::bind(config.form, config.params, history, weights)?;
    let factor = Arc::new(Factor::new(kernel, config.noise_variance)?);
    let alpha = factor.alpha(&atom_targets(history, atom_index)?);
    Ok(GpPosterior { factor, alpha })
}

/// Surrogate producing one prediction per atom at a query.
pub trait AtomSurrogate: Send + Sync {
    fn n_atoms(&self) -> usize;
    fn predict_atoms(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<Vec<Prediction>>;
}

/// Cholesky factor of the jittered latent Gram of a growing prompt set.
///
/// Appending a block of prompts costs `O(m²·b)` instead of refactoring;
/// when the appended Schur complement is not positive definite the whole
/// matrix is refactored with escalated jitter.
#[derive(Debug, Clone)]
pub struct LatentFactor {
    params: KernelParams,
    prompts: Vec<SoftPrompt>,
    lower: DMatrix<f64>,
    jitter: f64,
}

impl LatentFactor {
    pub fn new(params: KernelParams) -> Self {
        Self {
            params,
            prompts: Vec::new(),
            lower: DMatrix::zeros(0, 0),
            jitter: params.jitter,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Jitter currently added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Brings the factor up to date with the prompts of `history`.
    pub fn sync(&mut self, history: &History) -> Result<()> {
        let records = history.records();
        let old = self.prompts.len();
        let consistent = old <= records.len()
            && self.prompts.iter().zip(records).all(|(p, r)| p == &r.prompt);
        if !consistent {
            self.prompts = records.iter().map(|r| r.prompt.clone()).collect();
            return self.refactor();
        }
        if old == records.len() {
            return Ok(());
        }
        let new: Vec<SoftPrompt> = records[old..].iter().map(|r| r.prompt.clone()).collect();
        if old == 0 {
            self.prompts = new;
            return self.refactor();
        }
        let b = new.len();
        let k12 = DMatrix::from_fn(old, b, |i, j| latent_kernel(&self.prompts[i], &new[j], &self.params));
        let new_refs: Vec<&SoftPrompt> = new.iter().collect();
        let mut schur = latent_gram(&new_refs, &self.params);
        for i in 0..b {
            schur[(i, i)] += self.jitter;
        }
        let x = self
            .lower
            .solve_lower_triangular(&k12)
            .ok_or_else(|| Error::Numerical("singular latent factor".into()))?;
        schur -= x.transpose() * &x;
        self.prompts.extend(new);
        match Cholesky::new(schur) {
            Some(chol) => {
                let m = old + b;
                self.lower = std::mem::replace(&mut self.lower, DMatrix::zeros(0, 0)).resize(m, m, 0.0);
                self.lower.view_mut((old, 0), (b, old)).copy_from(&x.transpose());
                self.lower.view_mut((old, old), (b, b)).copy_from(&chol.unpack());
                Ok(())
            }
            None => self.refactor(),
        }
    }

    fn refactor(&mut self) -> Result<()> {
        if self.prompts.is_empty() {
            self.lower = DMatrix::zeros(0, 0);
            return Ok(());
        }
        let refs: Vec<&SoftPrompt> = self.prompts.iter().collect();
        let (chol, jitter) = cholesky_with_jitter(&latent_gram(&refs, &self.params), self.jitter.max(self.params.jitter))?;
        self.jitter = jitter;
        self.lower = chol.unpack();
        Ok(())
    }

    /// `l(P, p)`.
    fn column(&self, p: &SoftPrompt) -> DVector<f64> {
        DVector::from_iterator(self.prompts.len(), self.prompts.iter().map(|q| latent_kernel(q, p, &self.params)))
    }

    /// Solves in place for the `r` contiguous columns of `rhs`, streaming
    /// each column of `L` once for all right-hand sides.
    fn solve_columns(&self, rhs: &mut [f64], r: usize) {
        let m = self.prompts.len();
        let lower = self.lower.as_slice();
        for j in 0..m {
            let col = &lower[j * m..(j + 1) * m];
            for v in rhs.chunks_exact_mut(m).take(r) {
                let x = v[j] / col[j];
                v[j] = x;
                for (vi, lij) in v[j + 1..].iter_mut().zip(&col[j + 1..]) {
                    *vi -= x * lij;
                }
            }
        }
        for j in (0..m).rev() {
            let col = &lower[j * m..(j + 1) * m];
            for v in rhs.chunks_exact_mut(m).take(r) {
                let s = dot(&col[j + 1..], &v[j + 1..]);
                v[j] = (v[j] - s) / col[j];
            }
        }
    }

    /// `(K + jitter·I)⁻¹ v` in place, via `L Lᵀ`.
    fn solve_slice(&self, v: &mut [f64]) {
        let m = self.prompts.len();
        let lower = self.lower.as_slice();
        // Forward: column j of L is contiguous below the diagonal.
        for j in 0..m {
            let col = &lower[j * m..(j + 1) * m];
            let x = v[j] / col[j];
            v[j] = x;
            for (vi, lij) in v[j + 1..].iter_mut().zip(&col[j + 1..]) {
                *vi -= x * lij;
            }
        }
        // Backward with Lᵀ: row j of Lᵀ is column j of L.
        for j in (0..m).rev() {
            let col = &lower[j * m..(j + 1) * m];
            let s = dot(&col[j + 1..], &v[j + 1..]);
            v[j] = (v[j] - s) / col[j];
        }
    }
}

/// Exact sandwich posterior in the span of the instruction features.
///
/// The instruction Gram factors as `S = G Gᵀ` with `G = [F, 1, e]/√2`
/// (normalised trigram features, a constant column and an indicator of empty
/// texts), so the weighted training Gram is `S′ = U Uᵀ` with `U = D G`. With
/// `K` the jittered latent Gram, `σ²` the effective noise and
/// `R Rᵀ = σ² I + UᵀU`, the posterior at `p` is
///
/// * mean `= l(P, p)ᵀ K⁻¹ S′ (S′ + σ² I)⁻¹ y`,
/// * variance `= σ² ‖Vᵀ l(P, p)‖²` with `Vᵀ = R⁻¹ Uᵀ K⁻¹`,
///
/// so a query costs `O(m·r)` for `r` feature columns.
#[derive(Debug)]
struct LowRank {
    latent: Arc<LatentFactor>,
    u: DMatrix<f64>,
    inner: Cholesky<f64, Dyn>,
    /// `V` stored column-major, one contiguous column per feature.
    projection: DMatrix<f64>,
    noise: f64,
}

impl LowRank {
    /// Returns `None` when the dense path is no more expensive.
    fn build(
        history: &History,
        config: &KernelConfig,
        weights: Option<&WeightVector>,
        latent: Arc<LatentFactor>,
    ) -> Result<Option<Self>> {
        let records = history.records();
        let m = records.len();
        let mut columns: Vec<usize> = records.iter().flat_map(|r| r.instruction.support().iter().map(|&c| c as usize)).collect();
        columns.sort_unstable();
        columns.dedup();
        let any_empty = records.iter().any(|r| r.instruction.is_empty());
        let r = columns.len() + 1 + usize::from(any_empty);
        if m <= r {
            return Ok(None);
        }
        let scales = match weights {
            Some(w) => instruction_scales(history, w)?,
            None => None,
        };
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let mut u = DMatrix::zeros(m, r);
        for (i, rec) in records.iter().enumerate() {
            let d = scales.as_ref().map_or(1.0, |s| s[i]) * half;
            let f = rec.instruction.feature();
            for (k, &c) in columns.iter().enumerate() {
                u[(i, k)] = d * f[c];
            }
            u[(i, columns.len())] = d;
            if any_empty && rec.instruction.is_empty() {
                u[(i, r - 1)] = d;
            }
        }
        let noise = config.noise_variance + config.params.jitter;
        let mut gram = u.tr_mul(&u);
        for k in 0..r {
            gram[(k, k)] += noise;
        }
        let (inner, _) = cholesky_with_jitter(&gram, 0.0)?;
        let mut y = u.clone();
        latent.solve_columns(y.as_mut_slice(), r);
        // Vᵀ = R⁻¹ Yᵀ, then transpose back so each feature is a column.
        let mut vt = y.transpose();
        inner.l_dirty().solve_lower_triangular_mut(&mut vt);
        Ok(Some(Self {
            latent,
            u,
            inner,
            projection: vt.transpose(),
            noise,
        }))
    }

    /// `K⁻¹ S′ (S′ + σ² I)⁻¹ y`, so that the mean is `l(P, p)ᵀ` times it.
    fn mean_weights(&self, y: &DVector<f64>) -> DVector<f64> {
        let uty = self.u.tr_mul(y);
        let alpha = (y - &self.u * self.inner.solve(&uty)) / self.noise;
        let mut a = &self.u * self.u.tr_mul(&alpha);
        self.latent.solve_slice(a.as_mut_slice());
        a
    }

    fn predict(&self, p: &SoftPrompt, weights: &[DVector<f64>]) -> Vec<Prediction> {
        let l = self.latent.column(p);
        let l = l.as_slice();
        let m = l.len();
        let var: f64 = self
            .projection
            .as_slice()
            .chunks_exact(m)
            .map(|col| {
                let c = dot(col, l);
                c * c
            })
            .sum::<f64>()
            * self.noise;
        let std = var.max(0.0).sqrt();
        weights
            .iter()
            .map(|b| Prediction {
                mean: dot(b.as_slice(), l),
                std,
            })
            .collect()
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() - a.len() % 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = a_rest.iter().zip(b_rest).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone)]
enum AtomFactor {
    Dense(Arc<Factor>),
    LowRank(Arc<LowRank>),
}

/// Independent per-atom GPs sharing one factorization.
#[derive(Debug, Clone)]
pub struct AtomGps {
    factor: AtomFactor,
    alphas: Vec<DVector<f64>>,
}

impl AtomGps {
    pub fn fit(
        history: &History,
        config: &KernelConfig,
        n_atoms: usize,
        weights: Option<&WeightVector>,
    ) -> Result<Self> {
        let mut latent = Arc::new(LatentFactor::new(config.params));
        Self::fit_cached(history, config, n_atoms, weights, &mut latent)
    }

    /// Like [`fit`](Self::fit), reusing and extending a latent factor kept
    /// across rounds of the same run.
    pub fn fit_cached(
        history: &History,
        config: &KernelConfig,
        n_atoms: usize,
        weights: Option<&WeightVector>,
        latent: &mut Arc<LatentFactor>,
    ) -> Result<Self> {
        if n_atoms == 0 {
            return Err(Error::Precondition("surrogate needs at least one atom".into()));
        }
        if config.form == KernelForm::Sandwich && !history.is_empty() {
            config.params.validate()?;
            if latent.params != config.params {
                *latent = Arc::new(LatentFactor::new(config.params));
            }
            Arc::make_mut(latent).sync(history)?;
            if let Some(low) = LowRank::build(history, config, weights, Arc::clone(latent))? {
                let alphas = (0..n_atoms)
                    .map(|a| Ok(low.mean_weights(&atom_targets(history, a)?)))
                    .collect::<Result<Vec<_>>>()?;
                return Ok(Self {
                    factor: AtomFactor::LowRank(Arc::new(low)),
                    alphas,
                });
            }
        }
        let kernel = BoundKernel::bind(config.form, config.params, history, weights)?;
        let factor = Arc::new(Factor::new(kernel, config.noise_variance)?);
        let alphas = (0..n_atoms)
            .map(|a| {
                if history.is_empty() {
                    Ok(DVector::zeros(0))
                } else {
                    Ok(factor.alpha(&atom_targets(history, a)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            factor: AtomFactor::Dense(factor),
            alphas,
        })
    }

    /// Posterior of one atom.
    pub fn posterior(&self, atom: usize) -> AtomPosterior<'_> {
        AtomPosterior { gps: self, atom }
    }
}

/// View of one atom of an [`AtomGps`].
#[derive(Debug, Clone, Copy)]
pub struct AtomPosterior<'a> {
    gps: &'a AtomGps,
    atom: usize,
}

impl AtomPosterior<'_> {
    pub fn predict(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<Prediction> {
        Ok(self.gps.predict_atoms(p, v)?[self.atom])
    }
}

impl AtomSurrogate for AtomGps {
    fn n_atoms(&self) -> usize {
        self.alphas.len()
    }

    fn predict_atoms(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<Vec<Prediction>> {
        match &self.factor {
            AtomFactor::LowRank(low) => {
                if p.dim() != low.latent.prompts[0].dim() {
                    return Err(Error::Dimension {
                        context: "kernel query",
                        expected: low.latent.prompts[0].dim(),
                        found: p.dim(),
                    });
                }
                Ok(low.predict(p, &self.alphas))
            }
            AtomFactor::Dense(factor) => {
                let (k, var) = factor.variance(p, v)?;
                let std = var.sqrt();
                Ok(self
                    .alphas
                    .iter()
                    .map(|alpha| Prediction {
                        mean: if k.is_empty() { 0.0 } else { k.dot(alpha) },
                        std,
                    })
                    .collect())
            }
        }
    }
}

/// One GP over (prompt, atom) inputs with covariance
/// `k(x, x')·(ρ + (1 − ρ)·[a = a'])`.
#[derive(Debug, Clone)]
pub struct SharedGp {
    kernel: Arc<BoundKernel>,
    chol: Option<Arc<Cholesky<f64, Dyn>>>,
    alpha: DVector<f64>,
    n_atoms: usize,
    correlation: f64,
}

impl SharedGp {
    pub fn fit(
        history: &History,
        config: &KernelConfig,
        n_atoms: usize,
        correlation: f64,
        weights: Option<&WeightVector>,
    ) -> Result<Self> {
        if n_atoms == 0 {
            return Err(Error::Precondition("surrogate needs at least one atom".into()));
        }
        let kernel = BoundKernel::bind(config.form, config.params, history, weights)?;
        let m = history.len();
        if m == 0 {
            return Ok(Self {
                kernel: Arc::new(kernel),
                chol: None,
                alpha: DVector::zeros(0),
                n_atoms,
                correlation,
            });
        }
        let base = kernel.training_gram();
        let size = m * n_atoms;
        let mut gram = DMatrix::zeros(size, size);
        let mut y = DVector::zeros(size);
        for a in 0..n_atoms {
            for b in 0..n_atoms {
                let c = atom_correlation(a, b, correlation);
                for i in 0..m {
                    for j in 0..m {
                        gram[(a * m + i, b * m + j)] = c * base[(i, j)];
                    }
                }
            }
            for (i, r) in history.records().iter().enumerate() {
                y[a * m + i] = r.atom_scores[a];
            }
        }
        for i in 0..size {
            gram[(i, i)] += config.noise_variance;
        }
        let (chol, _) = cholesky_with_jitter(&gram, config.params.jitter)?;
        let alpha = chol.solve(&y);
        Ok(Self {
            kernel: Arc::new(kernel),
            chol: Some(Arc::new(chol)),
            alpha,
            n_atoms,
            correlation,
        })
    }
}

fn atom_correlation(a: usize, b: usize, rho: f64) -> f64 {
    if a == b {
        1.0
    } else {
        rho
    }
}

impl AtomSurrogate for SharedGp {
    fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    fn predict_atoms(&self, p: &SoftPrompt, v: Option<&Instruction>) -> Result<Vec<Prediction>> {
        let (k, kss) = self.kernel.cross(p, v)?;
        let Some(chol) = &self.chol else {
            return Ok(vec![Prediction { mean: 0.0, std: kss.sqrt() }; self.n_atoms]);
        };
        let m = k.len();
        (0..self.n_atoms)
            .map(|a| {
                let mut full = DVector::zeros(m * self.n_atoms);
                for b in 0..self.n_atoms {
                    let c = atom_correlation(a, b, self.correlation);
                    full.rows_mut(b * m, m).copy_from(&(&k * c));
                }
                let mean = full.dot(&self.alpha);
                chol.l_dirty().solve_lower_triangular_mut(&mut full);
                let var = (kss - full.norm_squared()).max(0.0);
                Ok(Prediction {
                    mean,
                    std: var.sqrt(),
                })
            })
            .collect()
    }
}
