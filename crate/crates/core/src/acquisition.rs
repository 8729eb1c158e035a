//! Acquisition functions: the per-atom UCB vector, expected improvement, the
//! robust score `min_{w ∈ ball} ⟨ucb, w⟩`, and deterministic top-k selection.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::ambiguity::{solve_inner, AmbiguitySpec};
use crate::error::{Error, Result};
use crate::gp::{AtomSurrogate, Prediction};
use crate::model::{Instruction, SoftPrompt, WeightVector};

/// Exploration coefficient `2·sqrt(2·ln(m + 1))`.
pub fn beta(m: usize) -> f64 {
    beta_with(m, 2.0, 2.0)
}

/// `scale·sqrt(inner·ln(m + 1))`.
pub fn beta_with(m: usize, scale: f64, inner: f64) -> f64 {
    scale * (inner * ((m + 1) as f64).ln()).sqrt()
}

/// `μ_t + β·σ_t` for every atom.
pub fn ucb_vector(predictions: &[Prediction], beta: f64) -> Vec<f64> {
    predictions.iter().map(|p| p.mean + beta * p.std).collect()
}

/// UCB vector of a surrogate at one query.
pub fn ucb_at(
    surrogate: &dyn AtomSurrogate,
    p: &SoftPrompt,
    v: Option<&Instruction>,
    beta: f64,
) -> Result<Vec<f64>> {
    Ok(ucb_vector(&surrogate.predict_atoms(p, v)?, beta))
}

/// Closed-form expected improvement over `incumbent` for a maximisation
/// problem; `max(μ − b, 0)` when the posterior is degenerate.
pub fn expected_improvement(prediction: Prediction, incumbent: f64) -> f64 {
    let gap = prediction.mean - incumbent;
    if !(prediction.std > 0.0) {
        return gap.max(0.0);
    }
    let z = gap / prediction.std;
    let normal = Normal::standard();
    (gap * normal.cdf(z) + prediction.std * normal.pdf(z)).max(0.0)
}

/// Robust and nominal acquisition values of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScore {
    pub ucb_vector: Vec<f64>,
    pub w_star: WeightVector,
    /// `⟨ucb, w*⟩`.
    pub robust_value: f64,
    /// `⟨ucb, w_ref⟩`.
    pub nominal_value: f64,
}

impl AcquisitionScore {
    /// `(1 − γ)·robust + γ·nominal`; the robust value when `γ` is absent.
    pub fn blended(&self, mixture_weight: Option<f64>) -> f64 {
        match mixture_weight {
            None => self.robust_value,
            Some(g) => (1.0 - g) * self.robust_value + g * self.nominal_value,
        }
    }
}

pub fn robust_score(ucb: &[f64], w_ref: &WeightVector, spec: &AmbiguitySpec) -> Result<AcquisitionScore> {
    let solution = solve_inner(ucb, w_ref, spec)?;
    Ok(AcquisitionScore {
        ucb_vector: ucb.to_vec(),
        nominal_value: w_ref.dot(ucb),
        robust_value: solution.value,
        w_star: solution.w_star,
    })
}

/// Scores `ucb` against a fixed adversarial weight (the economy mode, which
/// solves the inner problem once per round).
pub fn score_with_fixed_weight(ucb: &[f64], w_ref: &WeightVector, w_star: &WeightVector) -> Result<AcquisitionScore> {
    if ucb.len() != w_star.len() || ucb.len() != w_ref.len() {
        return Err(Error::Dimension {
            context: "fixed-weight score",
            expected: w_ref.len(),
            found: ucb.len(),
        });
    }
    Ok(AcquisitionScore {
        ucb_vector: ucb.to_vec(),
        nominal_value: w_ref.dot(ucb),
        robust_value: w_star.dot(ucb),
        w_star: w_star.clone(),
    })
}

/// Indices of the `k` highest scores, best first; ties go to the smaller
/// index and NaN scores rank last.
pub fn rank_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Precondition("no candidates to select from".into()));
    }
    if k > scores.len() {
        return Err(Error::Precondition(format!(
            "cannot select {k} of {} candidates",
            scores.len()
        )));
    }
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Scores every candidate robustly and returns the top `k` with their scores.
pub fn select_batch(
    candidates: &[(SoftPrompt, Option<Instruction>)],
    surrogate: &dyn AtomSurrogate,
    w_ref: &WeightVector,
    spec: &AmbiguitySpec,
    beta: f64,
    k: usize,
) -> Result<Vec<(usize, AcquisitionScore)>> {
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidates to select from".into()));
    }
    let scores = candidates
        .iter()
        .map(|(p, v)| robust_score(&ucb_at(surrogate, p, v.as_ref(), beta)?, w_ref, spec))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = scores.iter().map(|s| s.robust_value).collect();
    Ok(rank_top_k(&values, k)?
        .into_iter()
        .map(|i| (i, scores[i].clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_schedule_values() {
        assert_eq!(beta(0), 0.0);
        assert!((beta(1) - 2.3548).abs() < 1e-4);
        assert!((beta(9) - 4.2919).abs() < 1e-4);
        for m in 0..100 {
            assert!(beta(m + 1) >= beta(m));
        }
    }

    #[test]
    fn ucb_substitution() {
        let preds = [
            Prediction { mean: 0.5, std: 0.1 },
            Prediction { mean: 0.7, std: 0.2 },
        ];
        let u = ucb_vector(&preds, 2.0);
        assert!((u[0] - 0.7).abs() < 1e-15 && (u[1] - 1.1).abs() < 1e-15);
        assert_eq!(ucb_vector(&preds, 0.0), vec![0.5, 0.7]);
    }

    #[test]
    fn expected_improvement_examples() {
        assert_eq!(expected_improvement(Prediction { mean: 0.2, std: 0.0 }, 0.5), 0.0);
        let ei = expected_improvement(Prediction { mean: 0.8, std: 0.0 }, 0.5);
        assert!((ei - 0.3).abs() < 1e-15);
        let ei = expected_improvement(Prediction { mean: 0.5, std: 1.0 }, 0.5);
        assert!((ei - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((ei - 0.3989).abs() < 1e-4);
    }

    #[test]
    fn robust_score_endpoints() {
        let w = WeightVector::new(vec![0.5, 0.5]).unwrap();
        let s = robust_score(&[0.2, 0.8], &w, &AmbiguitySpec::kl(0.0)).unwrap();
        assert_eq!(s.robust_value, s.nominal_value);
        let s = robust_score(&[0.6, 0.6], &w, &AmbiguitySpec::kl(0.3)).unwrap();
        assert!((s.robust_value - 0.6).abs() < 1e-12);
    }

    #[test]
    fn top_k_ties_and_nan() {
        assert_eq!(rank_top_k(&[0.1, 0.5, 0.5, f64::NAN, 0.9], 5).unwrap(), vec![4, 1, 2, 0, 3]);
        assert!(rank_top_k(&[], 0).is_err());
        assert!(rank_top_k(&[1.0], 2).is_err());
    }
}
