//! Where trajectories come from: a synthetic environment with a policy, or
//! a remote OpenAI-compatible model with a questions file.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use sapo_core::reasoner::remote::{AnswerExtractor, RemoteClient, RemoteConfig, RemoteReasoner};
use sapo_core::reasoner::{Reasoner, SyntheticReasoner};
use sapo_core::records::read_jsonl;
use sapo_core::synthenv::{PolicyParams, SynthEnv};
use sapo_core::{Error, Question, Result};

#[derive(Args, Debug)]
pub struct SourceArgs {
    /// Synthetic environment JSON.
    #[arg(long, conflicts_with_all = ["model", "endpoint"])]
    pub env: Option<PathBuf>,
    /// Policy checkpoint for the environment; uniform when omitted.
    #[arg(long, requires = "env")]
    pub policy: Option<PathBuf>,
    /// Model name on a remote server.
    #[arg(long)]
    pub model: Option<String>,
    /// Server base URL; falls back to SAPO_ENDPOINT. The API key is read
    /// from SAPO_API_KEY.
    #[arg(long, requires = "model")]
    pub endpoint: Option<String>,
    /// Questions JSONL (id, prompt, gold_answer). Required for a remote model.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Regex whose first capture group is the final answer.
    #[arg(long, requires = "model")]
    pub answer_pattern: Option<String>,
    /// Append every remote request attempt to this JSONL file.
    #[arg(long, requires = "model")]
    pub audit_log: Option<PathBuf>,
    /// Cost of one generated step in the flop proxy.
    #[arg(long, default_value_t = 1.0)]
    pub per_step_cost: f64,
}

pub struct Source {
    pub reasoner: Box<dyn Reasoner>,
    pub questions: Vec<Question>,
}

impl SourceArgs {
    pub fn open(&self) -> Result<Source> {
        if let Some(path) = &self.env {
            let env = Arc::new(SynthEnv::load(path)?);
            let policy = match &self.policy {
                Some(p) => PolicyParams::load(p)?,
                None => PolicyParams::uniform(&env),
            };
            let questions = match &self.questions {
                Some(q) => read_jsonl(q)?,
                None => env.questions(),
            };
            let reasoner = SyntheticReasoner::new(env.clone(), policy, self.per_step_cost)?;
            return Ok(Source { reasoner: Box::new(reasoner), questions });
        }
        let Some(model) = &self.model else {
            return Err(Error::Config("pass --env for the synthetic backend or --model for a remote one".into()));
        };
        let Some(qpath) = &self.questions else {
            return Err(Error::Config("a remote model needs --questions".into()));
        };
        let mut cfg = match &self.endpoint {
            Some(e) => {
                let mut c = RemoteConfig::new(e.clone(), model.clone());
                c.api_key = std::env::var("SAPO_API_KEY").ok();
                c
            }
            None => RemoteConfig::from_env(model.clone())?,
        };
        cfg.audit_path = self.audit_log.clone();
        let extractor = match &self.answer_pattern {
            Some(p) => AnswerExtractor::new(p)?,
            None => AnswerExtractor::default(),
        };
        let questions: Vec<Question> = read_jsonl(qpath)?;
        let reasoner = RemoteReasoner::new(RemoteClient::new(cfg)?, extractor);
        Ok(Source { reasoner: Box::new(reasoner), questions })
    }
}
