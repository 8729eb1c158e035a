//! `dro-prompt`: run, compare, replay and post-process optimization runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dro_prompt::ambiguity::AmbiguitySpec;
use dro_prompt::experiment::{compare, CompareOptions};
use dro_prompt::plotdata::{convergence_csv, paired_csv};
use dro_prompt::trace::{replay_file, run_to_file, Trace};
use dro_prompt::{solve_inner, AcquisitionMode, Divergence, ExperimentConfig, WeightVector};

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "dro-prompt", version, about = "Distributionally robust soft-prompt optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set epsilon=0` or `--set evaluator.task=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        Ok(match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides)?,
            None => ExperimentConfig::from_toml_str("", &self.overrides)?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write its trace and summary.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for `trace.jsonl` and `summary.json`.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run several arms over every task and seed at equal budgets.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated arms (nominal-ei, nominal-ucb, robust, dro-without-bo).
        #[arg(long, value_delimiter = ',', default_value = "nominal-ei,nominal-ucb,robust,dro-without-bo")]
        arms: Vec<String>,
        /// Seeds as a list and/or inclusive ranges, e.g. `0-19` or `1,4,7`.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Restrict to these task indices (default: every task of the suite).
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<usize>>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Convert traces into plot-ready CSV.
    Plotdata {
        /// Trace files (`.jsonl`).
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Re-run a trace and check it reproduces bit-exactly.
    Replay {
        trace: PathBuf,
    },
    /// Solve the worst-case reweighting problem for inline vectors.
    SolveInner {
        /// Comma-separated acquisition values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        ucb: Vec<f64>,
        /// Comma-separated reference weights (normalized if needed).
        #[arg(long, value_delimiter = ',', required = true)]
        w_ref: Vec<f64>,
        #[arg(long)]
        epsilon: f64,
        /// kl, tv or w1.
        #[arg(long, default_value = "kl")]
        divergence: String,
        /// Ground metric for w1: rows separated by `;`, entries by `,`.
        /// Defaults to the 0/1 metric.
        #[arg(long)]
        metric: Option<String>,
    },
}

fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    return Err(format!("empty seed range `{part}`").into());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse()?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

fn parse_metric(text: &str) -> CliResult<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| row.split(',').map(|x| Ok(x.trim().parse::<f64>()?)).collect())
        .collect()
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| format!("cannot create {}: {e}", path.display()).into())
}

fn cmd_run(config: &ConfigArgs, out_dir: &Path) -> CliResult<()> {
    let experiment = config.load()?;
    create_dir(out_dir)?;
    let trace_path = out_dir.join("trace.jsonl");
    let result = run_to_file(&experiment, &trace_path)?;
    let summary = &result.summary;
    write_file(&out_dir.join("summary.json"), &(serde_json::to_string_pretty(summary)? + "\n"))?;
    println!("mode:        {} (effective {})", summary.acquisition_mode, summary.effective_mode);
    println!("rounds:      {}  evaluations: {}  calls: {}", summary.rounds, summary.evaluations, summary.evaluator_calls);
    println!("best:        {}", summary.best_instruction);
    println!("atom scores: {:?}", summary.best_atom_scores);
    println!("mean/worst:  {:.4} / {:.4}", summary.best_mean(), summary.best_worst());
    if let (Some(mean), Some(worst)) = (summary.test_mean(), summary.test_worst()) {
        println!("test:        {mean:.4} / {worst:.4}");
    }
    println!("trace:       {}", trace_path.display());
    Ok(())
}

fn cmd_compare(
    config: &ConfigArgs,
    arms: &[String],
    seeds: &str,
    tasks: Option<Vec<usize>>,
    workers: Option<usize>,
    out_dir: &Path,
) -> CliResult<()> {
    let experiment = config.load()?;
    let arms = arms.iter().map(|a| a.parse()).collect::<Result<Vec<AcquisitionMode>, _>>()?;
    let mut options = CompareOptions::new(arms, parse_seeds(seeds)?);
    options.tasks = tasks;
    options.workers = workers;
    options.trace_dir = Some(out_dir.join("traces"));
    create_dir(out_dir)?;
    let report = compare(&experiment, &options)?;
    let table = report.table_text();
    write_file(&out_dir.join("table.txt"), &table)?;
    write_file(&out_dir.join("table.csv"), &report.table_csv())?;
    write_file(&out_dir.join("runs.csv"), &report.runs_csv())?;
    write_file(&out_dir.join("seeds.csv"), &report.seeds_csv())?;
    write_file(&out_dir.join("report.json"), &(report.to_json()? + "\n"))?;
    print!("{table}");
    Ok(())
}

fn cmd_plotdata(paths: &[PathBuf], out_dir: &Path) -> CliResult<()> {
    let traces = paths.iter().map(Trace::read).collect::<Result<Vec<_>, _>>()?;
    create_dir(out_dir)?;
    for (path, trace) in paths.iter().zip(&traces) {
        let stem = path.file_stem().map_or("trace".into(), |s| s.to_string_lossy());
        let target = out_dir.join(format!("{stem}_convergence.csv"));
        write_file(&target, &convergence_csv(trace))?;
        println!("{}", target.display());
    }
    let arms: std::collections::BTreeSet<AcquisitionMode> =
        traces.iter().map(|t| t.header.config.acquisition_mode).collect();
    if arms.len() == 2 {
        let target = out_dir.join("paired.csv");
        write_file(&target, &paired_csv(&traces)?)?;
        println!("{}", target.display());
    }
    Ok(())
}

fn cmd_replay(path: &Path) -> CliResult<()> {
    let report = replay_file(path)?;
    if report.matches() {
        println!("{}: reproduced bit-exactly ({} rounds)", path.display(), report.replayed.rounds);
        Ok(())
    } else {
        let at = report
            .first_divergent_round
            .map_or("the summary".to_string(), |r| format!("round {r}"));
        Err(format!("{}: replay diverges at {at}", path.display()).into())
    }
}

fn cmd_solve_inner(
    ucb: &[f64],
    w_ref: &[f64],
    epsilon: f64,
    divergence: &str,
    metric: Option<&str>,
) -> CliResult<()> {
    let w_ref = WeightVector::normalized(w_ref.to_vec())?;
    let spec = match divergence.parse::<Divergence>()? {
        Divergence::Kl => AmbiguitySpec::kl(epsilon),
        Divergence::Tv => AmbiguitySpec::tv(epsilon),
        Divergence::W1 => {
            let n = w_ref.len();
            let metric = match metric {
                Some(text) => parse_metric(text)?,
                None => (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i != j))).collect()).collect(),
            };
            AmbiguitySpec::w1(epsilon, metric)
        }
    };
    let solution = solve_inner(ucb, &w_ref, &spec)?;
    let out = serde_json::json!({
        "value": solution.value,
        "nominal": w_ref.dot(ucb),
        "w_star": solution.w_star.as_slice(),
        "multiplier": solution.multiplier,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, out_dir } => cmd_run(config, out_dir),
        Command::Compare {
            config,
            arms,
            seeds,
            tasks,
            workers,
            out_dir,
        } => cmd_compare(config, arms, seeds, tasks.clone(), *workers, out_dir),
        Command::Plotdata { traces, out_dir } => cmd_plotdata(traces, out_dir),
        Command::Replay { trace } => cmd_replay(trace),
        Command::SolveInner {
            ucb,
            w_ref,
            epsilon,
            divergence,
            metric,
        } => cmd_solve_inner(ucb, w_ref, *epsilon, divergence, metric.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
