//! Line-delimited JSON run traces.
//!
//! A trace file holds one JSON object per line:
//!
//! 1. `{"type": "header", "schema_version": 1, "config": {..}, "evaluator": {..}}`
//!    with the full run configuration and evaluator description;
//! 2. one `{"type": "round", ..}` record per completed round (prompt
//!    coordinates, instruction texts, per-atom scores, acquisition values,
//!    `w_ref`, `w_star`, sampled atoms, radius and β);
//! 3. a final `{"type": "summary", ..}` record.
//!
//! Rounds are flushed as they complete, so a failed run leaves a valid
//! prefix without a summary. Wall-clock timings are deliberately absent:
//! re-running the header's configuration reproduces the file exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunConfig};
use crate::error::{Error, Result};
use crate::evaluators::EvaluatorSpec;
use crate::runner::{run_with_sink, RoundRecord, RoundSink, RunResult, RunSummary};

/// Version of the trace layout; readers reject other versions.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub config: RunConfig,
    pub evaluator: EvaluatorSpec,
}

impl TraceHeader {
    pub fn new(experiment: &ExperimentConfig) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            config: experiment.run.clone(),
            evaluator: experiment.evaluator.clone(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            run: self.config.clone(),
            evaluator: self.evaluator.clone(),
        }
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TraceLine {
    Header(TraceHeader),
    Round(RoundRecord),
    Summary(RunSummary),
}

/// A parsed trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub rounds: Vec<RoundRecord>,
    /// Absent when the run failed before finishing.
    pub summary: Option<RunSummary>,
}

impl Trace {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(BufReader::new(file).lines().map(|l| l.map_err(|e| Error::io(path, e))))
            .map_err(|e| match e {
                Error::Parse { what, message } => Error::Parse {
                    what,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let mut header = None;
        let mut rounds = Vec::new();
        let mut summary = None;
        for (number, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                let value: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|e| Error::parse("trace", format!("line {}: {e}", number + 1)))?;
                let version = value.get("schema_version").and_then(serde_json::Value::as_u64);
                if version != Some(u64::from(TRACE_SCHEMA_VERSION)) {
                    return Err(Error::parse(
                        "trace",
                        format!(
                            "unsupported schema version {} (expected {TRACE_SCHEMA_VERSION})",
                            version.map_or("<missing>".to_string(), |v| v.to_string())
                        ),
                    ));
                }
            }
            let parsed: TraceLine = serde_json::from_str(&line)
                .map_err(|e| Error::parse("trace", format!("line {}: {e}", number + 1)))?;
            match (parsed, header.is_some(), summary.is_some()) {
                (TraceLine::Header(h), false, _) => header = Some(h),
                (TraceLine::Round(r), true, false) => rounds.push(r),
                (TraceLine::Summary(s), true, false) => summary = Some(s),
                (_, _, true) => return Err(Error::parse("trace", "records after the summary")),
                (_, false, _) => return Err(Error::parse("trace", "first record must be the header")),
                (TraceLine::Header(_), true, _) => return Err(Error::parse("trace", "duplicate header")),
            }
        }
        let header = header.ok_or_else(|| Error::parse("trace", "empty trace"))?;
        Ok(Self {
            header,
            rounds,
            summary,
        })
    }
}

/// Writes trace lines to any writer, flushing after every record.
pub struct TraceWriter<W: Write> {
    writer: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(writer: W) -> Self {
        Self { writer }
    }

    pub fn write(&mut self, line: &TraceLine) -> Result<()> {
        let text = serde_json::to_string(line).map_err(|e| Error::parse("trace", e.to_string()))?;
        writeln!(self.writer, "{text}")
            .and_then(|()| self.writer.flush())
            .map_err(|e| Error::io("<trace>", e))
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> RoundSink for TraceWriter<W> {
    fn round(&mut self, record: &RoundRecord) -> Result<()> {
        self.write(&TraceLine::Round(record.clone()))
    }
}

/// Runs `experiment`, streaming the trace to `writer`.
pub fn run_to_writer<W: Write>(experiment: &ExperimentConfig, writer: W) -> Result<(RunResult, W)> {
    let evaluator = experiment.evaluator.build(&experiment.run)?;
    let mut trace = TraceWriter::new(writer);
    trace.write(&TraceLine::Header(TraceHeader::new(experiment)))?;
    let result = run_with_sink(&experiment.run, evaluator.as_ref(), &mut trace)?;
    trace.write(&TraceLine::Summary(result.summary.clone()))?;
    Ok((result, trace.into_inner()))
}

/// Runs `experiment` and writes its trace to `path`.
pub fn run_to_file(experiment: &ExperimentConfig, path: impl AsRef<Path>) -> Result<RunResult> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let (result, _) = run_to_writer(experiment, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    Ok(result)
}

/// Outcome of re-running a persisted trace.
#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub path: Option<PathBuf>,
    pub recorded: Option<RunSummary>,
    pub replayed: RunSummary,
    /// Index of the first round whose record differs, if any.
    pub first_divergent_round: Option<usize>,
    pub summary_matches: bool,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.summary_matches && self.first_divergent_round.is_none()
    }
}

/// Re-runs the configuration stored in `trace` and compares every record.
pub fn replay(trace: &Trace) -> Result<ReplayReport> {
    let experiment = trace.header.experiment();
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let evaluator = experiment.evaluator.build(&experiment.run)?;
    let result = run_with_sink(&experiment.run, evaluator.as_ref(), &mut rounds)?;
    let first_divergent_round = trace
        .rounds
        .iter()
        .zip(&rounds)
        .position(|(a, b)| !same_json(a, b))
        .or_else(|| (trace.rounds.len() != rounds.len() && trace.summary.is_some()).then(|| trace.rounds.len().min(rounds.len())));
    let summary_matches = trace.summary.as_ref().is_some_and(|s| same_json(s, &result.summary));
    Ok(ReplayReport {
        path: None,
        recorded: trace.summary.clone(),
        replayed: result.summary,
        first_divergent_round,
        summary_matches,
    })
}

pub fn replay_file(path: impl AsRef<Path>) -> Result<ReplayReport> {
    let path = path.as_ref();
    let mut report = replay(&Trace::read(path)?)?;
    report.path = Some(path.to_path_buf());
    Ok(report)
}

/// Bit-level equality through the serialized form (every `f64` is written
/// with its shortest round-trip representation).
fn same_json<T: Serialize>(a: &T, b: &T) -> bool {
    match (serde_json::to_string(a), serde_json::to_string(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
