//! OpenAI-compatible chat-completions client and the reasoner built on it.
//!
//! Requests go to `POST {endpoint}/v1/chat/completions` with body
//! `{model, messages, temperature, n, max_tokens}`; completions are read from
//! `choices[*].message.content`. Transient failures (429, 5xx, timeouts,
//! connection errors) are retried with exponential backoff.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Reasoner, RolloutCount, RolloutResult};
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::types::{Question, Trajectory, TrajectorySource};

pub const ENDPOINT_ENV: &str = "SAPO_ENDPOINT";
pub const API_KEY_ENV: &str = "SAPO_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("request to {url} timed out (attempt {attempt})")]
    Timeout { url: String, attempt: u32 },
    #[error("network error talking to {url}: {message}")]
    Network { url: String, message: String },
    #[error("HTTP {status} from {url}: {body}")]
    Http { url: String, status: u16, body: String },
    #[error("malformed response body: {0}")]
    Parse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl RemoteError {
    fn retryable(&self) -> bool {
        match self {
            RemoteError::Timeout { .. } | RemoteError::Network { .. } => true,
            RemoteError::Http { status, .. } => *status == 429 || *status >= 500,
            RemoteError::Parse(_) | RemoteError::InvalidRequest(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://localhost:8000`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    /// Optional JSONL audit log of every request attempt.
    pub audit_path: Option<PathBuf>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(20),
            max_tokens: 1024,
            max_in_flight: 4,
            audit_path: None,
        }
    }

    /// Endpoint and key from `SAPO_ENDPOINT` / `SAPO_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))?;
        let mut cfg = RemoteConfig::new(endpoint, model);
        cfg.api_key = std::env::var(API_KEY_ENV).ok();
        Ok(cfg)
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// Texts returned by a completed call plus how many retries it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub texts: Vec<String>,
    pub retries: u32,
}

/// Counting gate capping concurrent requests.
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct GateGuard<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut active = self.active.lock().expect("gate mutex poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate mutex poisoned");
        }
        *active += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("gate mutex poisoned");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    cfg: RemoteConfig,
    http: reqwest::blocking::Client,
    gate: InFlightGate,
    audit: Option<Mutex<BufWriter<File>>>,
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| RemoteError::InvalidRequest(e.to_string()))?;
        let audit = match &cfg.audit_path {
            Some(p) => {
                let f = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
                Some(Mutex::new(BufWriter::new(f)))
            }
            None => None,
        };
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(RemoteClient { cfg, http, gate, audit })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn log(&self, entry: serde_json::Value) {
        if let Some(a) = &self.audit {
            let mut w = a.lock().expect("audit mutex poisoned");
            // audit failures must not break inference
            if serde_json::to_writer(&mut *w, &entry).is_ok() {
                let _ = w.write_all(b"\n").and_then(|_| w.flush());
            }
        }
    }

    fn attempt(&self, body: &serde_json::Value, attempt: u32) -> std::result::Result<Vec<String>, RemoteError> {
        let url = self.cfg.url();
        let _slot = self.gate.acquire();
        let mut req = self.http.post(&url).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                RemoteError::Timeout { url: url.clone(), attempt }
            } else {
                RemoteError::Network { url: url.clone(), message: e.to_string() }
            }
        });
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                self.log(json!({"attempt": attempt, "url": url, "request": body, "error": e.to_string()}));
                return Err(e);
            }
        };
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| RemoteError::Network { url: url.clone(), message: e.to_string() })?;
        self.log(json!({"attempt": attempt, "url": url, "request": body, "status": status, "response": text}));
        if !(200..300).contains(&status) {
            return Err(RemoteError::Http { url, status, body: text });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| {
            tracing::warn!(%url, error = %e, "malformed chat-completions body");
            RemoteError::Parse(format!("{e}; body: {}", truncate(&text, 200)))
        })?;
        if parsed.choices.is_empty() {
            return Err(RemoteError::Parse("response has no choices".into()));
        }
        Ok(parsed.choices.into_iter().map(|c| c.message.content.unwrap_or_default()).collect())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(16)).unwrap_or(u32::MAX);
        self.cfg.backoff_base.saturating_mul(factor).min(self.cfg.backoff_cap)
    }

    /// One logical call with bounded retries.
    pub fn chat(
        &self,
        messages: &[ChatMessage],
        n: usize,
        temperature: f64,
    ) -> std::result::Result<Completion, RemoteError> {
        if n == 0 {
            return Err(RemoteError::InvalidRequest("n must be >= 1".into()));
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": temperature,
            "n": n,
            "max_tokens": self.cfg.max_tokens,
        });
        let mut retries = 0;
        loop {
            match self.attempt(&body, retries + 1) {
                Ok(texts) => return Ok(Completion { texts, retries }),
                Err(e) if e.retryable() && retries < self.cfg.max_retries => {
                    tracing::debug!(error = %e, retry = retries + 1, "retrying chat completion");
                    std::thread::sleep(self.backoff(retries));
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// `n` completions for a single user prompt. Servers that return fewer
    /// choices than asked are re-queried for the remainder.
    pub fn remote_sample(&self, prompt: &str, n: usize, temperature: f64) -> std::result::Result<Completion, RemoteError> {
        let messages = [ChatMessage::user(prompt)];
        let mut out = Completion { texts: Vec::with_capacity(n), retries: 0 };
        while out.texts.len() < n {
            let c = self.chat(&messages, n - out.texts.len(), temperature)?;
            out.retries += c.retries;
            out.texts.extend(c.texts);
        }
        out.texts.truncate(n);
        Ok(out)
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Reads a final answer off the last step with a configurable regex; the
/// first capture group wins, else the whole match, else the trimmed step.
#[derive(Debug, Clone)]
pub struct AnswerExtractor {
    pattern: Regex,
}

pub const DEFAULT_ANSWER_PATTERN: &str = r"(?:####|(?i:answer)\s*(?:is)?\s*[:=]?)\s*(.+?)\s*\.?\s*$";

impl Default for AnswerExtractor {
    fn default() -> Self {
        AnswerExtractor::new(DEFAULT_ANSWER_PATTERN).expect("default answer pattern compiles")
    }
}

impl AnswerExtractor {
    pub fn new(pattern: &str) -> Result<Self> {
        let pattern = Regex::new(pattern).map_err(|e| Error::Config(format!("bad answer pattern: {e}")))?;
        Ok(AnswerExtractor { pattern })
    }

    pub fn extract(&self, last_step: &str) -> String {
        match self.pattern.captures(last_step) {
            Some(c) => c.get(1).or_else(|| c.get(0)).map(|m| m.as_str().trim().to_string()).unwrap_or_default(),
            None => last_step.trim().to_string(),
        }
    }
}

/// Reasoner over a remote LLM. Step segmentation splits completion text on
/// a delimiter (newline by default), dropping blank pieces.
pub struct RemoteReasoner {
    client: RemoteClient,
    extractor: AnswerExtractor,
    sample_template: String,
    rollout_template: String,
    step_delimiter: String,
}

pub const DEFAULT_SAMPLE_TEMPLATE: &str =
    "Solve the problem step by step, one step per line. End with a line `Answer: <answer>`.\n\n{question}";
pub const DEFAULT_ROLLOUT_TEMPLATE: &str = "Solve the problem step by step, one step per line. End with a line \
`Answer: <answer>`.\n\n{question}\n\nContinue this partial solution from where it stops. Do not repeat it.\n{prefix}";

impl RemoteReasoner {
    pub fn new(client: RemoteClient, extractor: AnswerExtractor) -> Self {
        RemoteReasoner {
            client,
            extractor,
            sample_template: DEFAULT_SAMPLE_TEMPLATE.into(),
            rollout_template: DEFAULT_ROLLOUT_TEMPLATE.into(),
            step_delimiter: "\n".into(),
        }
    }

    /// Templates use `{question}` and (for rollouts) `{prefix}` placeholders.
    pub fn with_templates(mut self, sample: impl Into<String>, rollout: impl Into<String>) -> Self {
        self.sample_template = sample.into();
        self.rollout_template = rollout.into();
        self
    }

    pub fn with_step_delimiter(mut self, delimiter: impl Into<String>) -> Self {
        self.step_delimiter = delimiter.into();
        self
    }

    pub fn split_steps(&self, text: &str) -> Vec<String> {
        text.split(self.step_delimiter.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    fn build(&self, q: &Question, mut steps: Vec<String>, source: TrajectorySource, seed: u64) -> Result<Trajectory> {
        if steps.is_empty() {
            return Err(RemoteError::Parse(format!("completion for {} contains no steps", q.id)).into());
        }
        let answer = self.extractor.extract(steps.last().expect("non-empty"));
        steps.shrink_to_fit();
        Trajectory::new(q.id.clone(), steps, answer, source, seed)
    }
}

impl Reasoner for RemoteReasoner {
    fn sample(&self, q: &Question, n: usize, temperature: f64, seed: u64) -> Result<(Vec<Trajectory>, CostLedger)> {
        let prompt = self.sample_template.replace("{question}", &q.prompt);
        let c = self.client.remote_sample(&prompt, n, temperature)?;
        let mut out = Vec::with_capacity(c.texts.len());
        let mut steps_total = 0u64;
        for text in &c.texts {
            let t = self.build(q, self.split_steps(text), TrajectorySource::Sampled, seed)?;
            steps_total += t.len() as u64;
            out.push(t);
        }
        Ok((out, CostLedger::batch(n as u64, steps_total, 1.0)))
    }

    fn rollout(
        &self,
        q: &Question,
        prefix: &[String],
        count: RolloutCount,
        temperature: f64,
        seed: u64,
    ) -> Result<RolloutResult> {
        let k = match count {
            RolloutCount::Sampled(k) if k > 0 => k,
            RolloutCount::Sampled(_) => return Err(Error::InvalidArgument("rollout count must be >= 1".into())),
            RolloutCount::Exhaustive => {
                return Err(Error::InvalidArgument("remote backends cannot enumerate completions".into()))
            }
        };
        let prompt = self
            .rollout_template
            .replace("{question}", &q.prompt)
            .replace("{prefix}", &prefix.join(&self.step_delimiter));
        let c = self.client.remote_sample(&prompt, k, temperature)?;
        let mut completions = Vec::with_capacity(k);
        let mut generated = 0u64;
        for text in &c.texts {
            let new_steps = self.split_steps(text);
            generated += new_steps.len() as u64;
            let mut steps = prefix.to_vec();
            steps.extend(new_steps);
            completions.push(self.build(q, steps, TrajectorySource::RolloutExtension, seed)?);
        }
        Ok(RolloutResult { completions, ledger: CostLedger::batch(k as u64, generated, 1.0) })
    }
}
