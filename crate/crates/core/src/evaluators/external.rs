//! Chat-completions client scoring instructions by exact match.
//!
//! Each example is sent as one request whose user message is the
//! instruction followed by the input. The reply is trimmed and case-folded
//! before it is compared with the expected output. Transport failures are
//! retried with exponential backoff; an example that still fails scores 0
//! and is flagged in the report.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::synthetic::{Quantizer, Template};
use super::{Evaluator, EvaluatorReport, ScoreMode};
use crate::config::AtomMode;
use crate::error::{Error, Result};
use crate::model::{Instruction, ProjectionMatrix, SoftPrompt};

/// Attempts per request: the first call plus three retries.
const ATTEMPTS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalExample {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalTask {
    pub name: String,
    pub examples: Vec<ExternalExample>,
    /// Held-out examples used for test-mode scoring.
    #[serde(default)]
    pub test_examples: Vec<ExternalExample>,
}

fn default_key_env() -> String {
    "DRO_PROMPT_API_KEY".into()
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    60
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Delay before the first retry; doubles on every further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub template: Template,
    #[serde(default)]
    pub quantizer: Quantizer,
    pub tasks: Vec<ExternalTask>,
}

/// Lower-cased, whitespace-trimmed answer used for exact matching.
pub fn normalize_answer(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Scores one instruction on `examples`, one request per example. Returns
/// the exact-match average, the number of requests made and the indices of
/// examples that failed after all retries.
pub fn external_evaluate(
    instruction: &Instruction,
    examples: &[ExternalExample],
    client: &ChatClient,
) -> Result<(f64, u64, Vec<usize>)> {
    if examples.is_empty() {
        return Err(Error::Precondition("external evaluation needs at least one example".into()));
    }
    let mut matches = vec![false; examples.len()];
    let mut failed = vec![false; examples.len()];
    let mut calls = 0u64;
    let cap = client.config.max_in_flight.max(1);
    for (chunk_index, chunk) in examples.chunks(cap).enumerate() {
        let answers: Vec<(Result<String>, u32)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|ex| scope.spawn(move || client.complete(instruction.text(), &ex.input)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| (Err(Error::Evaluator("request thread panicked".into())), 1)))
                .collect()
        });
        for (offset, (answer, attempts)) in answers.into_iter().enumerate() {
            let i = chunk_index * cap + offset;
            calls += u64::from(attempts);
            match answer {
                Ok(text) => matches[i] = normalize_answer(&text) == normalize_answer(&examples[i].output),
                Err(_) => failed[i] = true,
            }
        }
    }
    let score = matches.iter().filter(|m| **m).count() as f64 / examples.len() as f64;
    let flagged = (0..examples.len()).filter(|&i| failed[i]).collect();
    Ok((score, calls, flagged))
}

/// Minimal blocking chat-completions client.
#[derive(Debug)]
pub struct ChatClient {
    config: ExternalConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl ChatClient {
    /// Fails with a configuration error when the credential is missing.
    pub fn new(config: ExternalConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            Error::config(
                "api_key_env",
                format!("environment variable `{}` is not set", config.api_key_env),
            )
        })?;
        if config.endpoint.trim().is_empty() {
            return Err(Error::config("endpoint", "must not be empty"));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .new_agent();
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    fn request_once(&self, instruction: &str, input: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{ "role": "user", "content": format!("{instruction}\n\n{input}") }],
        });
        let mut response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::Evaluator(format!("request to {} failed: {e}", self.config.endpoint)))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Evaluator(format!("unreadable response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Evaluator("response has no choices[0].message.content".into()))
    }

    /// Completion text and the number of attempts spent.
    pub fn complete(&self, instruction: &str, input: &str) -> (Result<String>, u32) {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last = Error::Evaluator("no attempt made".into());
        for attempt in 1..=ATTEMPTS {
            match self.request_once(instruction, input) {
                Ok(text) => return (Ok(text), attempt),
                Err(e) => last = e,
            }
            if attempt < ATTEMPTS {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        (Err(last), ATTEMPTS)
    }
}

/// External tasks exposed as an [`Evaluator`]: atoms are the tasks in
/// per-task mode and the individual examples in per-example mode.
#[derive(Debug)]
pub struct ExternalEvaluator {
    client: ChatClient,
    atom_mode: AtomMode,
}

impl ExternalEvaluator {
    pub fn new(config: ExternalConfig, atom_mode: AtomMode) -> Result<Self> {
        if config.tasks.is_empty() {
            return Err(Error::config("tasks", "external evaluator needs at least one task"));
        }
        if config.tasks.iter().any(|t| t.examples.is_empty()) {
            return Err(Error::config("tasks", "every task needs at least one example"));
        }
        Ok(Self {
            client: ChatClient::new(config)?,
            atom_mode,
        })
    }

    fn examples(&self, task: &ExternalTask, mode: ScoreMode) -> Vec<ExternalExample> {
        match mode {
            ScoreMode::Test if !task.test_examples.is_empty() => task.test_examples.clone(),
            _ => task.examples.clone(),
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn n_atoms(&self) -> usize {
        match self.atom_mode {
            AtomMode::PerTask => self.client.config.tasks.len(),
            AtomMode::PerExample => self.client.config.tasks.iter().map(|t| t.examples.len()).sum(),
        }
    }

    fn projected_dim(&self) -> usize {
        self.client.config.template.stems.len()
    }

    fn generate_instruction(&self, p: &SoftPrompt, a: &ProjectionMatrix) -> Result<Instruction> {
        self.client.config.template.generate(p, a, &self.client.config.quantizer)
    }

    fn evaluate(&self, instruction: &Instruction, mode: ScoreMode) -> Result<EvaluatorReport> {
        let mut atom_scores = Vec::new();
        let mut calls = 0;
        let mut flagged = Vec::new();
        let mut offset = 0;
        for task in &self.client.config.tasks {
            let examples = self.examples(task, mode);
            match self.atom_mode {
                AtomMode::PerTask => {
                    let (score, c, f) = external_evaluate(instruction, &examples, &self.client)?;
                    atom_scores.push(score);
                    calls += c;
                    flagged.extend(f.into_iter().map(|i| i + offset));
                }
                AtomMode::PerExample => {
                    for ex in examples.iter().take(task.examples.len()) {
                        let (score, c, f) = external_evaluate(instruction, std::slice::from_ref(ex), &self.client)?;
                        atom_scores.push(score);
                        calls += c;
                        if !f.is_empty() {
                            flagged.push(offset + atom_scores.len() - 1);
                        }
                    }
                }
            }
            offset += examples.len();
        }
        Ok(EvaluatorReport {
            instruction: instruction.clone(),
            atom_scores,
            calls_consumed: calls,
            flagged,
        })
    }

    fn supports_test(&self) -> bool {
        self.client.config.tasks.iter().any(|t| !t.test_examples.is_empty())
    }
}
