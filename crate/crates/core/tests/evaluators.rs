//! Contracts of the synthetic evaluator: smooth instruction generation,
//! a genuine validation/test shift, and exact budget accounting.

use dro_prompt::evaluators::synthetic::{Quantizer, SyntheticSuite, SyntheticTask};
use dro_prompt::kernels::instruction_similarity;
use dro_prompt::model::{stream_rng, Stream};
use dro_prompt::{run, AtomMode, Evaluator, ProjectionMatrix, RunConfig, ScoreMode, SoftPrompt};
use rand::Rng;

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let average = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[order[k]] = average;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn nearby_prompts_give_similar_instructions() {
    let suite = SyntheticSuite::load("shift").unwrap();
    let config = RunConfig::default();
    let evaluator = dro_prompt::EvaluatorSpec::default().build(&config).unwrap();
    let mut rng = stream_rng(5, Stream::Init);
    let a = ProjectionMatrix::sample(config.d, config.d_prime, &mut rng);
    let mut distances = Vec::new();
    let mut dissimilarity = Vec::new();
    for _ in 0..100 {
        let p: Vec<f64> = (0..config.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = rng.random_range(0.0..0.5);
        let q: Vec<f64> = p.iter().map(|x| (x + scale * rng.random_range(-1.0..1.0f64)).clamp(-1.0, 1.0)).collect();
        let (p, q) = (SoftPrompt::new(p, 1.0).unwrap(), SoftPrompt::new(q, 1.0).unwrap());
        let (zp, zq) = (a.project(&p).unwrap(), a.project(&q).unwrap());
        distances.push(zp.iter().zip(&zq).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
        let (vp, vq) = (
            evaluator.generate_instruction(&p, &a).unwrap(),
            evaluator.generate_instruction(&q, &a).unwrap(),
        );
        dissimilarity.push(1.0 - instruction_similarity(&vp, &vq));
    }
    let rho = spearman(&distances, &dissimilarity);
    assert!(rho > 0.3, "rank correlation {rho}");
    assert_eq!(suite.tasks.len(), 10);
}

#[test]
fn validation_and_test_optima_differ_under_shift() {
    let quantizer = Quantizer::default();
    let max = quantizer.max_level as i32;
    for seed in 0..20 {
        let task = SyntheticTask::random("grid", seed, 2, &quantizer, true);
        for atom in 0..task.atoms.len() {
            let argmax = |mode: ScoreMode| {
                let mut best = (f64::NEG_INFINITY, vec![]);
                for i in -max..=max {
                    for j in -max..=max {
                        let x = vec![quantizer.position(i), quantizer.position(j)];
                        let s = task.raw_score(&x, atom, mode);
                        if s > best.0 {
                            best = (s, x);
                        }
                    }
                }
                best
            };
            let (val_best, val_x) = argmax(ScoreMode::Validation);
            let (_, test_x) = argmax(ScoreMode::Test);
            assert_ne!(val_x, test_x, "seed {seed} atom {atom}");
            assert!((val_best - 1.0).abs() < 1e-12, "validation optimum reaches 1");
        }
    }
    // Without a shift the two distributions coincide.
    let task = SyntheticTask::random("flat", 3, 2, &quantizer, false);
    let x = [0.5, -0.25];
    for atom in 0..task.atoms.len() {
        assert_eq!(task.raw_score(&x, atom, ScoreMode::Validation), task.raw_score(&x, atom, ScoreMode::Test));
    }
}

#[test]
fn run_budget_is_rounds_times_batch_times_calls_per_evaluation() {
    for (atom_mode, per_evaluation) in [(AtomMode::PerTask, 2u64), (AtomMode::PerExample, 40)] {
        let config = RunConfig {
            max_steps: 4,
            batch_size: 6,
            atom_mode,
            ..RunConfig::default()
        };
        let evaluator = dro_prompt::EvaluatorSpec::default().build(&config).unwrap();
        let result = run(&config, evaluator.as_ref()).unwrap();
        let total: u64 = result.rounds.iter().map(|r| r.evaluator_calls).sum();
        assert_eq!(total, 4 * 6 * per_evaluation, "{atom_mode:?}");
        assert_eq!(result.summary.evaluator_calls, total);
    }
}
