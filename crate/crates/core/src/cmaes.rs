//! CMA-ES in the standard (μ/μ_w, λ) formulation, maximising fitness.
//!
//! Candidates are clamped to the box `[−bound, bound]ᵈ` before they are
//! returned; the update uses the clamped points, so the distribution never
//! drifts towards unreachable regions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Smallest eigenvalue kept when the covariance is repaired.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Strategy constants derived from the dimension and population size.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaParams {
    pub population: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_c: f64,
    pub c_s: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub damps: f64,
    pub chi_n: f64,
}

impl CmaParams {
    /// Default population `4 + ⌊3 ln d⌋`.
    pub fn default_population(dim: usize) -> usize {
        4 + (3.0 * (dim as f64).ln()).floor() as usize
    }

    pub fn new(dim: usize, population: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("CMA-ES dimension must be >= 1".into()));
        }
        if population < 2 {
            return Err(Error::Precondition("CMA-ES population must be >= 2".into()));
        }
        let n = dim as f64;
        let mu = population / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| ((population as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_s = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let damps = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_s;
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(Self {
            population,
            mu,
            weights,
            mu_eff,
            c_c,
            c_s,
            c_1,
            c_mu,
            damps,
            chi_n,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CmaState {
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_c: DVector<f64>,
    p_s: DVector<f64>,
    generation: usize,
    bound: f64,
    params: CmaParams,
    // Eigendecomposition C = B·diag(D²)·Bᵀ, refreshed after every update.
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    repairs: usize,
}

impl CmaState {
    /// Identity covariance around `mean` with the default population.
    pub fn new(mean: Vec<f64>, sigma: f64, bound: f64) -> Result<Self> {
        let pop = CmaParams::default_population(mean.len());
        Self::with_population(mean, sigma, bound, pop)
    }

    pub fn with_population(mean: Vec<f64>, sigma: f64, bound: f64, population: usize) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Precondition(format!("CMA-ES step size must be > 0, got {sigma}")));
        }
        if !(bound >= 0.0) {
            return Err(Error::Precondition(format!("CMA-ES bound must be >= 0, got {bound}")));
        }
        let d = mean.len();
        let params = CmaParams::new(d, population)?;
        let mean = DVector::from_iterator(d, mean.into_iter().map(|x| x.clamp(-bound, bound)));
        Ok(Self {
            mean,
            sigma,
            cov: DMatrix::identity(d, d),
            p_c: DVector::zeros(d),
            p_s: DVector::zeros(d),
            generation: 0,
            bound,
            params,
            basis: DMatrix::identity(d, d),
            scales: DVector::from_element(d, 1.0),
            repairs: 0,
        })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population(&self) -> usize {
        self.params.population
    }

    pub fn params(&self) -> &CmaParams {
        &self.params
    }

    /// Number of times the covariance needed eigenvalue clipping.
    pub fn repairs(&self) -> usize {
        self.repairs
    }

    /// Samples `population` candidates from `N(mean, σ²C)`, clamped to the box.
    pub fn ask(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let d = self.mean.len();
        (0..self.params.population)
            .map(|_| {
                let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let y = &self.basis * z.component_mul(&self.scales);
                (0..d)
                    .map(|i| (self.mean[i] + self.sigma * y[i]).clamp(-self.bound, self.bound))
                    .collect()
            })
            .collect()
    }

    /// Updates the distribution from evaluated candidates (higher fitness is
    /// better; non-finite fitness ranks last, ties go to the earlier index).
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) -> Result<()> {
        let lambda = self.params.population;
        if candidates.len() != lambda || fitness.len() != lambda {
            return Err(Error::Precondition(format!(
                "tell expects {lambda} candidates and fitnesses, got {} and {}",
                candidates.len(),
                fitness.len()
            )));
        }
        let d = self.mean.len();
        if let Some(bad) = candidates.iter().find(|c| c.len() != d) {
            return Err(Error::Dimension {
                context: "CMA-ES candidate",
                expected: d,
                found: bad.len(),
            });
        }
        let key = |f: f64| if f.is_finite() { f } else { f64::NEG_INFINITY };
        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| key(fitness[b]).total_cmp(&key(fitness[a])).then(a.cmp(&b)));

        let p = &self.params;
        let old_mean = self.mean.clone();
        let steps: Vec<DVector<f64>> = order[..p.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old_mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(d);
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }
        self.mean = &old_mean + &y_w * self.sigma;

        // C^{-1/2} y_w = B D⁻¹ Bᵀ y_w
        let whitened = &self.basis * (self.basis.transpose() * &y_w).component_div(&self.scales);
        self.p_s = &self.p_s * (1.0 - p.c_s) + whitened * (p.c_s * (2.0 - p.c_s) * p.mu_eff).sqrt();
        let gen = (self.generation + 1) as f64;
        let ps_norm = self.p_s.norm();
        let h_sig = ps_norm / (1.0 - (1.0 - p.c_s).powf(2.0 * gen)).sqrt() / p.chi_n
            < 1.4 + 2.0 / (d as f64 + 1.0);
        let h = if h_sig { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(d, d);
        for (w, y) in p.weights.iter().zip(&steps) {
            rank_mu.ger(*w, y, y, 1.0);
        }
        let correction = (1.0 - h) * p.c_c * (2.0 - p.c_c);
        self.cov = &self.cov * (1.0 - p.c_1 - p.c_mu + p.c_1 * correction)
            + &self.p_c * self.p_c.transpose() * p.c_1
            + rank_mu * p.c_mu;
        crate::kernels::symmetrize(&mut self.cov);

        self.sigma *= ((p.c_s / p.damps) * (ps_norm / p.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() {
            self.sigma = f64::MAX;
        }
        self.sigma = self.sigma.max(f64::MIN_POSITIVE);
        self.generation += 1;
        self.refresh_eigen();
        Ok(())
    }

    fn refresh_eigen(&mut self) {
        let eig = self.cov.clone().symmetric_eigen();
        let mut values = eig.eigenvalues.clone();
        if values.iter().any(|v| !(*v >= EIGEN_FLOOR)) {
            values.apply(|v| *v = if v.is_finite() { v.max(EIGEN_FLOOR) } else { EIGEN_FLOOR });
            self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
            crate::kernels::symmetrize(&mut self.cov);
            self.repairs += 1;
        }
        self.scales = values.map(f64::sqrt);
        self.basis = eig.eigenvectors;
    }
}
