//! Run configuration: a flat key/value document (TOML) whose every key can
//! be overridden from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reasoner::RolloutCount;
use crate::synthenv::EnvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Math,
    Code,
}

/// Which policy the per-iteration alignment starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignBase {
    /// The supervised policy from initialization.
    #[default]
    M0,
    /// The previous iteration's policy.
    Prev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed. Required for anything that samples; there is no clock default.
    pub seed: Option<u64>,
    pub domain: Domain,
    /// Trajectories sampled per question per iteration (K).
    pub samples_per_question: usize,
    /// Rollouts per verification point (K_v), or `"all"` for exhaustive.
    pub rollout_count: RolloutCount,
    pub temperature_math: f64,
    pub temperature_code: f64,
    /// Score threshold separating correct from incorrect steps.
    pub step_threshold: f64,
    /// Minimum reward gap for a preference pair (eta).
    pub pref_threshold: f64,
    pub max_pairs_per_question: usize,
    /// Odds-ratio term weight (beta).
    pub orpo_beta: f64,
    pub iterations: usize,
    pub cluster_count: usize,
    pub per_cluster: usize,
    /// Restrict verification to a K-means subset; unset means "math yes, code no".
    pub use_subset: Option<bool>,
    /// Sampling gives up after `retry_factor * K` attempts per question.
    pub retry_factor: usize,
    /// Normalized edit similarity at or above which a sample is a near-duplicate.
    pub dedup_similarity: f64,
    pub per_step_flop: f64,
    pub record_wall_time: bool,

    pub verifier_dim: usize,
    pub verifier_hash_seed: u64,
    pub verifier_lr: f64,
    pub verifier_epochs: usize,
    pub verifier_batch: usize,

    pub sft_lr: f64,
    pub sft_epochs: usize,

    pub align_lr: f64,
    pub align_epochs: usize,
    pub align_batch: usize,
    pub align_base: AlignBase,

    /// Load the environment from this file instead of generating one.
    pub env_path: Option<String>,
    pub env_depth: usize,
    pub env_branching: usize,
    pub env_questions: usize,
    pub env_width: usize,
    pub env_difficulty: f64,
    /// Fraction of questions that get a gold demonstration for supervised init.
    pub demo_fraction: f64,
    /// Fixed probe trajectories per question for the reasoner-verifier gap.
    pub probe_per_question: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            domain: Domain::Math,
            samples_per_question: 8,
            rollout_count: RolloutCount::Sampled(8),
            temperature_math: 1.0,
            temperature_code: 0.7,
            step_threshold: 0.5,
            pref_threshold: 0.3,
            max_pairs_per_question: 4,
            orpo_beta: 0.1,
            iterations: 3,
            cluster_count: 8,
            per_cluster: 100,
            use_subset: None,
            retry_factor: 3,
            dedup_similarity: 0.9,
            per_step_flop: 1.0,
            record_wall_time: false,
            verifier_dim: 1 << 16,
            verifier_hash_seed: 0,
            verifier_lr: 2.0,
            verifier_epochs: 30,
            verifier_batch: 64,
            sft_lr: 0.5,
            sft_epochs: 10,
            align_lr: 0.1,
            align_epochs: 5,
            align_batch: 16,
            align_base: AlignBase::M0,
            env_path: None,
            env_depth: 8,
            env_branching: 3,
            env_questions: 50,
            env_width: 12,
            env_difficulty: 0.2,
            demo_fraction: 0.5,
            probe_per_question: 2,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Overrides one key with a TOML value. Bare words that do not parse as
    /// TOML are taken as strings, so `domain=code` works unquoted.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("--set {key}={value}: {}", e.message())))?;
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        match self.domain {
            Domain::Math => self.temperature_math,
            Domain::Code => self.temperature_code,
        }
    }

    pub fn subset_enabled(&self) -> bool {
        self.use_subset.unwrap_or(self.domain == Domain::Math)
    }

    /// Generation parameters for the synthetic environment.
    pub fn env_params(&self, seed: u64) -> EnvParams {
        EnvParams {
            depth: self.env_depth,
            branching: self.env_branching,
            questions: self.env_questions,
            width: self.env_width,
            difficulty: self.env_difficulty,
            seed,
            ..EnvParams::default()
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (set `seed` or pass --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.samples_per_question < 1 {
            return fail("samples_per_question must be >= 1".into());
        }
        if let RolloutCount::Sampled(0) = self.rollout_count {
            return fail("rollout_count must be >= 1".into());
        }
        if !(self.step_threshold > 0.0 && self.step_threshold < 1.0) {
            return fail(format!("step_threshold {} must lie in (0, 1)", self.step_threshold));
        }
        if !(0.0..=1.0).contains(&self.pref_threshold) {
            return fail(format!("pref_threshold {} must lie in [0, 1]", self.pref_threshold));
        }
        if self.orpo_beta.is_nan() || self.orpo_beta <= 0.0 {
            return fail(format!("orpo_beta {} must be > 0", self.orpo_beta));
        }
        if self.temperature_math <= 0.0 || self.temperature_code <= 0.0 {
            return fail("temperatures must be > 0".into());
        }
        if self.cluster_count < 1 || self.per_cluster < 1 {
            return fail("cluster_count and per_cluster must be >= 1".into());
        }
        if self.retry_factor < 1 {
            return fail("retry_factor must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.dedup_similarity) {
            return fail("dedup_similarity must lie in [0, 1]".into());
        }
        if self.per_step_flop < 0.0 {
            return fail("per_step_flop must be >= 0".into());
        }
        if self.verifier_dim == 0 {
            return fail("verifier_dim must be > 0".into());
        }
        if self.env_path.is_none() {
            if self.env_questions == 0 {
                return fail("env_questions must be >= 1".into());
            }
            if self.env_branching < 2 || self.env_depth < 1 || self.env_width < 2 {
                return fail("env needs branching >= 2, depth >= 1, width >= 2".into());
            }
            if !(0.0..1.0).contains(&self.env_difficulty) {
                return fail("env_difficulty must lie in [0, 1)".into());
            }
        }
        if !(0.0..=1.0).contains(&self.demo_fraction) {
            return fail("demo_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}
