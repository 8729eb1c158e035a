//! Shared fixtures for the benchmarks.

use dro_prompt::model::{stream_rng, Stream};
use dro_prompt::{EvalRecord, History, Instruction, SoftPrompt};
use rand::Rng;

/// A reproducible history of `m` evaluations over `n_atoms` atoms.
pub fn history(m: usize, dim: usize, n_atoms: usize, seed: u64) -> History {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut h = History::new();
    for i in 0..m {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let levels: Vec<String> = (0..4).map(|_| "+".repeat(rng.random_range(0..4))).collect();
        let text = format!("Answer the question: concise{} formal{} literal{} stepwise{}", levels[0], levels[1], levels[2], levels[3]);
        let scores = (0..n_atoms).map(|_| rng.random_range(0.0..1.0)).collect();
        h.append(EvalRecord::new(SoftPrompt::new(p, 1.0).unwrap(), Instruction::new(text), scores, i, 0))
            .unwrap();
    }
    h
}
