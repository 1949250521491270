//! The reasoner contract: diverse sampling, rollout completion and Monte
//! Carlo step-correctness estimation, over either the synthetic environment
//! or a remote OpenAI-compatible server.

mod dedup;
pub mod remote;
mod synthetic;

pub use dedup::{dedup_filter, normalized_edit_similarity};
pub use remote::{AnswerExtractor, RemoteReasoner};
pub use synthetic::SyntheticReasoner;

use std::collections::HashSet;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::keys::{canonical_key, derive_seed};
use crate::ledger::CostLedger;
use crate::types::{Question, Trajectory};

/// Rollouts per estimation point: a fixed sample count, or every possible
/// completion (only backends that can enumerate support this).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutCount {
    Sampled(usize),
    Exhaustive,
}

impl fmt::Display for RolloutCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RolloutCount::Sampled(n) => write!(f, "{n}"),
            RolloutCount::Exhaustive => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for RolloutCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(RolloutCount::Exhaustive);
        }
        let n: usize = s.parse().map_err(|_| Error::Config(format!("rollout count `{s}` is not a number or `all`")))?;
        if n == 0 {
            return Err(Error::Config("rollout count must be >= 1".into()));
        }
        Ok(RolloutCount::Sampled(n))
    }
}

impl Serialize for RolloutCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RolloutCount::Sampled(n) => s.serialize_u64(*n as u64),
            RolloutCount::Exhaustive => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for RolloutCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = RolloutCount;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"all\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<RolloutCount, E> {
                Ok(RolloutCount::Sampled(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<RolloutCount, E> {
                usize::try_from(v).map(RolloutCount::Sampled).map_err(|_| E::custom("negative rollout count"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<RolloutCount, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Completions that all start with the same prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub completions: Vec<Trajectory>,
    pub ledger: CostLedger,
}

/// A generator of reasoning trajectories.
///
/// Implementations must be deterministic in `seed` and must count every
/// generated completion in the returned ledger.
pub trait Reasoner: Send + Sync {
    /// Draws `n` independent trajectories for `q`.
    fn sample(&self, q: &Question, n: usize, temperature: f64, seed: u64) -> Result<(Vec<Trajectory>, CostLedger)>;

    /// Completes `prefix` (possibly empty) into full trajectories. Every
    /// completion starts with exactly `prefix`.
    fn rollout(
        &self,
        q: &Question,
        prefix: &[String],
        count: RolloutCount,
        temperature: f64,
        seed: u64,
    ) -> Result<RolloutResult>;

    /// Final answers of a rollout. Backends may override this when answers
    /// can be produced without materializing completions; the ledger must
    /// still count what an actual rollout would generate.
    fn rollout_answers(
        &self,
        q: &Question,
        prefix: &[String],
        count: RolloutCount,
        temperature: f64,
        seed: u64,
    ) -> Result<(Vec<String>, CostLedger)> {
        let r = self.rollout(q, prefix, count, temperature, seed)?;
        Ok((r.completions.into_iter().map(|c| c.final_answer).collect(), r.ledger))
    }
}

/// A deduplicated sampling batch.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub trajectories: Vec<Trajectory>,
    pub ledger: CostLedger,
    pub attempts: usize,
}

/// Samples up to `k` trajectories whose canonical keys are new relative to
/// `existing_keys` and to each other. Keeps drawing until `k` are found or
/// `retry_factor * k` attempts were spent.
pub fn sample_batch(
    reasoner: &dyn Reasoner,
    q: &Question,
    k: usize,
    temperature: f64,
    existing_keys: &HashSet<String>,
    retry_factor: usize,
    seed: u64,
) -> Result<SampleBatch> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample count K must be >= 1".into()));
    }
    let max_attempts = retry_factor.max(1) * k;
    let mut kept: Vec<Trajectory> = Vec::with_capacity(k);
    let mut seen: HashSet<String> = HashSet::new();
    let mut ledger = CostLedger::default();
    let mut attempts = 0usize;
    let mut round = 0u64;
    while kept.len() < k && attempts < max_attempts {
        let n = (k - kept.len()).min(max_attempts - attempts);
        let round_seed = derive_seed(seed, &["sample", &q.id, &round.to_string()]);
        let (drawn, l) = match reasoner.sample(q, n, temperature, round_seed) {
            Ok(v) => v,
            Err(e) => {
                return Err(Error::Sampling { attempts, partial: kept, source: Box::new(e) });
            }
        };
        ledger += l;
        attempts += n;
        round += 1;
        for t in drawn {
            let key = canonical_key(&t);
            if !existing_keys.contains(&key) && seen.insert(key) {
                kept.push(t);
            }
        }
    }
    Ok(SampleBatch { trajectories: kept, ledger, attempts })
}

/// Monte Carlo correctness of a prefix: 1 iff any completion reaches the
/// gold answer.
pub fn mc_step_correct(
    reasoner: &dyn Reasoner,
    q: &Question,
    prefix: &[String],
    count: RolloutCount,
    temperature: f64,
    seed: u64,
) -> Result<(u8, CostLedger)> {
    let (answers, ledger) = reasoner.rollout_answers(q, prefix, count, temperature, seed)?;
    Ok((u8::from(answers.iter().any(|a| q.is_correct(a))), ledger))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_count_parses_numbers_and_all() {
        assert_eq!("8".parse::<RolloutCount>().unwrap(), RolloutCount::Sampled(8));
        assert_eq!("ALL".parse::<RolloutCount>().unwrap(), RolloutCount::Exhaustive);
        assert!("0".parse::<RolloutCount>().is_err());
        assert!("x".parse::<RolloutCount>().is_err());
        let v: RolloutCount = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(v, RolloutCount::Exhaustive);
        assert_eq!(serde_json::to_string(&RolloutCount::Sampled(3)).unwrap(), "3");
    }
}
