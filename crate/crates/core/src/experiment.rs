//! Multi-arm, multi-seed comparisons at matched query budgets.
//!
//! Every (arm, task, seed) triple is an independent run. The report gives
//! each arm's **ID** score (mean-atom validation score of the selected
//! instruction) and **Shift** score (worst-atom test score), averaged over
//! tasks per seed, then summarised across seeds. Arms are only tabulated when
//! every arm consumed exactly the same number of evaluator calls on every
//! (task, seed).

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{AcquisitionMode, ExperimentConfig};
use crate::error::{Error, Result};
use crate::runner::{run, RunSummary};
use crate::trace::run_to_file;

/// Version of the comparison report layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Scores within this distance count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub arms: Vec<AcquisitionMode>,
    pub seeds: Vec<u64>,
    /// Tasks of the evaluator suite to run; `None` runs every task.
    pub tasks: Option<Vec<usize>>,
    /// When set, each run's trace is written below this directory.
    pub trace_dir: Option<PathBuf>,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl CompareOptions {
    pub fn new(arms: Vec<AcquisitionMode>, seeds: Vec<u64>) -> Self {
        Self {
            arms,
            seeds,
            tasks: None,
            trace_dir: None,
            workers: None,
        }
    }
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub arm: AcquisitionMode,
    pub task: usize,
    pub seed: u64,
    /// Mean-atom validation score of the selected instruction.
    pub id: f64,
    /// Worst-atom test score of the selected instruction (worst-atom
    /// validation score when the evaluator has no test split).
    pub shift: f64,
    pub evaluator_calls: u64,
    pub best_instruction: String,
}

impl RunRow {
    pub fn from_summary(task: usize, summary: &RunSummary) -> Self {
        Self {
            arm: summary.acquisition_mode,
            task,
            seed: summary.seed,
            id: summary.best_mean(),
            shift: summary.test_worst().unwrap_or_else(|| summary.best_worst()),
            evaluator_calls: summary.evaluator_calls,
            best_instruction: summary.best_instruction.clone(),
        }
    }
}

/// One row of the arm table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub arm: AcquisitionMode,
    pub id_mean: f64,
    pub shift_mean: f64,
    pub id_std: f64,
    pub shift_std: f64,
    /// Evaluator calls per run.
    pub query_budget: u64,
    pub runs: usize,
}

/// Task-averaged scores of every arm for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    /// Same order as the report's arms.
    pub id: Vec<f64>,
    pub shift: Vec<f64>,
    /// Arm with the strictly highest Shift score, if unique.
    pub shift_winner: Option<AcquisitionMode>,
}

/// Seed-averaged scores of every arm on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub id: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Per-task Shift outcome of the robust arm against another arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub opponent: AcquisitionMode,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAudit {
    /// Total evaluator calls per arm, same order as the arms.
    pub total_calls: Vec<u64>,
    pub equal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub arms: Vec<AcquisitionMode>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<usize>,
    pub table: Vec<ArmStats>,
    pub per_seed: Vec<SeedRow>,
    pub per_task: Vec<TaskRow>,
    pub win_tie_loss: Vec<WinTieLoss>,
    pub budget_audit: BudgetAudit,
    pub runs: Vec<RunRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (zero for a single value).
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Median (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ComparisonReport {
    /// Assembles the report from finished runs, refusing unequal budgets.
    pub fn from_rows(arms: &[AcquisitionMode], seeds: &[u64], tasks: &[usize], runs: Vec<RunRow>) -> Result<Self> {
        if arms.len() < 2 {
            return Err(Error::Precondition("a comparison needs at least two arms".into()));
        }
        if seeds.is_empty() || tasks.is_empty() {
            return Err(Error::Precondition("a comparison needs at least one seed and one task".into()));
        }
        let find = |arm: AcquisitionMode, task: usize, seed: u64| -> Result<&RunRow> {
            runs.iter()
                .find(|r| r.arm == arm && r.task == task && r.seed == seed)
                .ok_or_else(|| Error::Invariant(format!("missing run {} task {task} seed {seed}", arm.name())))
        };

        let mut total_calls = vec![0u64; arms.len()];
        for &task in tasks {
            for &seed in seeds {
                let calls: Vec<u64> = arms.iter().map(|&a| find(a, task, seed).map(|r| r.evaluator_calls)).collect::<Result<_>>()?;
                if calls.iter().any(|&c| c != calls[0]) {
                    let detail: Vec<String> = arms.iter().zip(&calls).map(|(a, c)| format!("{}={c}", a.name())).collect();
                    return Err(Error::Invariant(format!(
                        "budget audit failed on task {task} seed {seed}: {}",
                        detail.join(", ")
                    )));
                }
                for (t, c) in total_calls.iter_mut().zip(&calls) {
                    *t += c;
                }
            }
        }

        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut id = Vec::with_capacity(arms.len());
            let mut shift = Vec::with_capacity(arms.len());
            for &arm in arms {
                let rows: Vec<&RunRow> = tasks.iter().map(|&t| find(arm, t, seed)).collect::<Result<_>>()?;
                id.push(mean(&rows.iter().map(|r| r.id).collect::<Vec<_>>()));
                shift.push(mean(&rows.iter().map(|r| r.shift).collect::<Vec<_>>()));
            }
            let best = shift.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let leaders: Vec<usize> = (0..arms.len()).filter(|&i| shift[i] >= best - TIE_TOLERANCE).collect();
            let shift_winner = (leaders.len() == 1).then(|| arms[leaders[0]]);
            per_seed.push(SeedRow {
                seed,
                id,
                shift,
                shift_winner,
            });
        }

        let mut per_task = Vec::with_capacity(tasks.len());
        for &task in tasks {
            let mut id = Vec::with_capacity(arms.len());
            let mut shift = Vec::with_capacity(arms.len());
            for &arm in arms {
                let rows: Vec<&RunRow> = seeds.iter().map(|&s| find(arm, task, s)).collect::<Result<_>>()?;
                id.push(mean(&rows.iter().map(|r| r.id).collect::<Vec<_>>()));
                shift.push(mean(&rows.iter().map(|r| r.shift).collect::<Vec<_>>()));
            }
            per_task.push(TaskRow { task, id, shift });
        }

        let table = arms
            .iter()
            .enumerate()
            .map(|(i, &arm)| {
                let ids: Vec<f64> = per_seed.iter().map(|s| s.id[i]).collect();
                let shifts: Vec<f64> = per_seed.iter().map(|s| s.shift[i]).collect();
                ArmStats {
                    arm,
                    id_mean: mean(&ids),
                    shift_mean: mean(&shifts),
                    id_std: std_dev(&ids),
                    shift_std: std_dev(&shifts),
                    query_budget: total_calls[i] / (seeds.len() * tasks.len()) as u64,
                    runs: seeds.len() * tasks.len(),
                }
            })
            .collect();

        let win_tie_loss = match arms.iter().position(|&a| a == AcquisitionMode::Robust) {
            None => Vec::new(),
            Some(r) => arms
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != r)
                .map(|(i, &opponent)| {
                    let mut wtl = WinTieLoss {
                        opponent,
                        wins: 0,
                        ties: 0,
                        losses: 0,
                    };
                    for row in &per_task {
                        let diff = row.shift[r] - row.shift[i];
                        if diff.abs() <= TIE_TOLERANCE {
                            wtl.ties += 1;
                        } else if diff > 0.0 {
                            wtl.wins += 1;
                        } else {
                            wtl.losses += 1;
                        }
                    }
                    wtl
                })
                .collect(),
        };

        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            arms: arms.to_vec(),
            seeds: seeds.to_vec(),
            tasks: tasks.to_vec(),
            table,
            per_seed,
            per_task,
            win_tie_loss,
            budget_audit: BudgetAudit {
                equal: true,
                total_calls,
            },
            runs,
        })
    }

    fn arm_index(&self, arm: AcquisitionMode) -> Option<usize> {
        self.arms.iter().position(|&a| a == arm)
    }

    pub fn stats(&self, arm: AcquisitionMode) -> Option<&ArmStats> {
        self.table.iter().find(|s| s.arm == arm)
    }

    /// Seeds on which `arm` has the unique best Shift score.
    pub fn shift_wins(&self, arm: AcquisitionMode) -> usize {
        self.per_seed.iter().filter(|s| s.shift_winner == Some(arm)).count()
    }

    /// Per-seed Shift differences `a − b` of the task-averaged scores.
    pub fn shift_differences(&self, a: AcquisitionMode, b: AcquisitionMode) -> Option<Vec<f64>> {
        let (i, j) = (self.arm_index(a)?, self.arm_index(b)?);
        Some(self.per_seed.iter().map(|s| s.shift[i] - s.shift[j]).collect())
    }

    /// The arm table as aligned text with the columns
    /// `Method | ID | Shift | Std ID | Std Shift | Query budget`.
    pub fn table_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "| {:<16} | {:>7} | {:>7} | {:>7} | {:>9} | {:>12} |",
            "Method", "ID", "Shift", "Std ID", "Std Shift", "Query budget"
        );
        let _ = writeln!(out, "|{:-<18}|{:->9}|{:->9}|{:->9}|{:->11}|{:->14}|", "", "", "", "", "", "");
        for s in &self.table {
            let _ = writeln!(
                out,
                "| {:<16} | {:>7.4} | {:>7.4} | {:>7.4} | {:>9.4} | {:>12} |",
                s.arm.name(),
                s.id_mean,
                s.shift_mean,
                s.id_std,
                s.shift_std,
                s.query_budget
            );
        }
        for w in &self.win_tie_loss {
            let _ = writeln!(
                out,
                "robust vs {}: {} wins / {} ties / {} losses over {} tasks (Shift)",
                w.opponent.name(),
                w.wins,
                w.ties,
                w.losses,
                self.tasks.len()
            );
        }
        out
    }

    /// The arm table as CSV.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("method,id,shift,std_id,std_shift,query_budget\n");
        for s in &self.table {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.arm.name(),
                s.id_mean,
                s.shift_mean,
                s.id_std,
                s.shift_std,
                s.query_budget
            );
        }
        out
    }

    /// One CSV row per run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("arm,task,seed,id,shift,evaluator_calls,best_instruction\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},\"{}\"",
                r.arm.name(),
                r.task,
                r.seed,
                r.id,
                r.shift,
                r.evaluator_calls,
                r.best_instruction.replace('"', "\"\"")
            );
        }
        out
    }

    /// One CSV row per seed with every arm's task-averaged scores.
    pub fn seeds_csv(&self) -> String {
        let mut out = String::from("seed");
        for a in &self.arms {
            let _ = write!(out, ",{0}_id,{0}_shift", a.name());
        }
        out.push_str(",shift_winner\n");
        for s in &self.per_seed {
            let _ = write!(out, "{}", s.seed);
            for (id, shift) in s.id.iter().zip(&s.shift) {
                let _ = write!(out, ",{id},{shift}");
            }
            let _ = writeln!(out, ",{}", s.shift_winner.map_or("", |a| a.name()));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("report", e.to_string()))
    }
}

/// Runs every (arm, task, seed) triple of `experiment` and builds the report.
pub fn compare(experiment: &ExperimentConfig, options: &CompareOptions) -> Result<ComparisonReport> {
    if options.arms.len() < 2 {
        return Err(Error::Precondition("a comparison needs at least two arms".into()));
    }
    if options.seeds.is_empty() {
        return Err(Error::Precondition("a comparison needs at least one seed".into()));
    }
    let tasks = match &options.tasks {
        Some(t) => t.clone(),
        None => (0..experiment.evaluator.task_count()?).collect(),
    };
    let mut jobs = Vec::new();
    for &arm in &options.arms {
        for &task in &tasks {
            for &seed in &options.seeds {
                jobs.push((arm, task, seed));
            }
        }
    }
    let workers = options
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(arm, task, seed)) = jobs.get(i) else {
            break;
        };
        let outcome = run_job(experiment, options, arm, task, seed);
        results.lock().expect("result slot")[i] = Some(outcome);
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(work);
            }
        });
    }
    let runs = results
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    ComparisonReport::from_rows(&options.arms, &options.seeds, &tasks, runs)
}

fn run_job(
    experiment: &ExperimentConfig,
    options: &CompareOptions,
    arm: AcquisitionMode,
    task: usize,
    seed: u64,
) -> Result<RunRow> {
    let mut job = experiment.clone();
    job.run.acquisition_mode = arm;
    job.run.seed = seed;
    job.evaluator = experiment.evaluator.with_task(task);
    let result = match &options.trace_dir {
        Some(dir) => run_to_file(&job, dir.join(arm.name()).join(format!("task{task}_seed{seed}.jsonl")))?,
        None => {
            let evaluator = job.evaluator.build(&job.run)?;
            run(&job.run, evaluator.as_ref())?
        }
    };
    Ok(RunRow::from_summary(task, &result.summary))
}
