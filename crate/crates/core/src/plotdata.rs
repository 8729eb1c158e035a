//! Plot-ready CSV derived from run traces.
//!
//! * a convergence table per trace, one row per round;
//! * a paired table over the traces of two arms, one row per task with the
//!   seed-averaged ID and Shift scores of the baseline and the robust arm.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::AcquisitionMode;
use crate::error::{Error, Result};
use crate::evaluators::EvaluatorSpec;
use crate::experiment::RunRow;
use crate::runner::Aggregate;
use crate::trace::Trace;

/// Per-round convergence curve of one trace.
pub fn convergence_csv(trace: &Trace) -> String {
    let n = trace.rounds.first().map_or(0, |r| r.w_ref.len());
    let mut out = String::from("round,evaluations,evaluator_calls,best_so_far,batch_mean,batch_worst,epsilon,beta");
    for a in 0..n {
        let _ = write!(out, ",w_ref_{a}");
    }
    for a in 0..n {
        let _ = write!(out, ",w_star_{a}");
    }
    out.push('\n');
    let mut evaluations = 0;
    let mut calls = 0;
    for r in &trace.rounds {
        evaluations += r.evaluations.len();
        calls += r.evaluator_calls;
        let means: Vec<f64> = r.evaluations.iter().map(|e| Aggregate::Mean.of(&e.atom_scores)).collect();
        let worsts: Vec<f64> = r.evaluations.iter().map(|e| Aggregate::Worst.of(&e.atom_scores)).collect();
        let batch_mean = means.iter().sum::<f64>() / means.len().max(1) as f64;
        let batch_worst = worsts.iter().sum::<f64>() / worsts.len().max(1) as f64;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round, evaluations, calls, r.best_so_far, batch_mean, batch_worst, r.epsilon, r.beta
        );
        for w in r.w_ref.as_slice().iter().chain(r.w_star.as_slice()) {
            let _ = write!(out, ",{w}");
        }
        out.push('\n');
    }
    out
}

fn task_of(spec: &EvaluatorSpec) -> usize {
    match spec {
        EvaluatorSpec::Synthetic { task, .. } => *task,
        EvaluatorSpec::External(_) => 0,
    }
}

/// Paired per-task scores of a baseline arm and the robust arm.
///
/// The traces must be complete and come from exactly two arms, one of them
/// robust.
pub fn paired_csv(traces: &[Trace]) -> Result<String> {
    let mut rows: Vec<RunRow> = Vec::with_capacity(traces.len());
    for (i, t) in traces.iter().enumerate() {
        let summary = t
            .summary
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("trace {i} has no summary (unfinished run)")))?;
        rows.push(RunRow::from_summary(task_of(&t.header.evaluator), summary));
    }
    let mut arms: Vec<AcquisitionMode> = rows.iter().map(|r| r.arm).collect();
    arms.sort_by_key(|a| a.name());
    arms.dedup();
    if arms.len() != 2 || !arms.contains(&AcquisitionMode::Robust) {
        let names: Vec<&str> = arms.iter().map(|a| a.name()).collect();
        return Err(Error::Precondition(format!(
            "paired data needs traces of the robust arm and one baseline, found [{}]",
            names.join(", ")
        )));
    }
    let baseline = arms.into_iter().find(|&a| a != AcquisitionMode::Robust).expect("two arms");
    // task -> (baseline rows, robust rows)
    let mut by_task: BTreeMap<usize, (Vec<&RunRow>, Vec<&RunRow>)> = BTreeMap::new();
    for r in &rows {
        let entry = by_task.entry(r.task).or_default();
        if r.arm == baseline {
            entry.0.push(r);
        } else {
            entry.1.push(r);
        }
    }
    let avg = |rs: &[&RunRow], f: fn(&RunRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let mut out = String::from("task,baseline_arm,baseline_id,baseline_shift,robust_id,robust_shift,baseline_runs,robust_runs\n");
    for (task, (base, robust)) in &by_task {
        if base.is_empty() || robust.is_empty() {
            return Err(Error::Precondition(format!("task {task} lacks traces for both arms")));
        }
        let _ = writeln!(
            out,
            "{task},{},{},{},{},{},{},{}",
            baseline.name(),
            avg(base, |r| r.id),
            avg(base, |r| r.shift),
            avg(robust, |r| r.id),
            avg(robust, |r| r.shift),
            base.len(),
            robust.len()
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::trace::run_to_writer;

    fn trace(mode: AcquisitionMode, task: usize, seed: u64) -> Trace {
        let mut e = ExperimentConfig::default();
        e.run.max_steps = 4;
        e.run.batch_size = 3;
        e.run.cma_generations = 2;
        e.run.acquisition_mode = mode;
        e.run.seed = seed;
        e.evaluator = e.evaluator.with_task(task);
        let (_, bytes) = run_to_writer(&e, Vec::new()).unwrap();
        Trace::parse(&String::from_utf8(bytes).unwrap()).unwrap()
    }

    #[test]
    fn convergence_has_one_row_per_round() {
        let csv = convergence_csv(&trace(AcquisitionMode::Robust, 0, 1));
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.starts_with("round,evaluations,evaluator_calls,best_so_far"));
    }

    #[test]
    fn paired_has_one_row_per_task() {
        let traces = vec![
            trace(AcquisitionMode::Robust, 0, 1),
            trace(AcquisitionMode::NominalUcb, 0, 1),
            trace(AcquisitionMode::Robust, 1, 1),
            trace(AcquisitionMode::NominalUcb, 1, 1),
        ];
        let csv = paired_csv(&traces).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,nominal-ucb,"));
    }

    #[test]
    fn paired_requires_two_arms() {
        let traces = vec![trace(AcquisitionMode::Robust, 0, 1)];
        assert!(paired_csv(&traces).is_err());
    }
}
