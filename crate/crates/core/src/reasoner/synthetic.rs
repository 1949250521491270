use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Reasoner, RolloutCount, RolloutResult};
use crate::error::{Error, Result};
use crate::keys::derive_seed;
use crate::ledger::CostLedger;
use crate::synthenv::{PolicyParams, SynthEnv};
use crate::types::{Question, Trajectory, TrajectorySource};

/// Reasoner backed by a tabular policy on the synthetic environment.
#[derive(Debug, Clone)]
pub struct SyntheticReasoner {
    env: Arc<SynthEnv>,
    policy: PolicyParams,
    per_step_cost: f64,
}

impl SyntheticReasoner {
    pub fn new(env: Arc<SynthEnv>, policy: PolicyParams, per_step_cost: f64) -> Result<Self> {
        policy.check_compatible(&env)?;
        Ok(SyntheticReasoner { env, policy, per_step_cost })
    }

    pub fn env(&self) -> &SynthEnv {
        &self.env
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
        }
        Ok(())
    }
}

impl Reasoner for SyntheticReasoner {
    fn sample(&self, q: &Question, n: usize, temperature: f64, seed: u64) -> Result<(Vec<Trajectory>, CostLedger)> {
        Self::check_temperature(temperature)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = derive_seed(seed, &[&i.to_string()]);
            out.push(self.policy.sample_trajectory(&self.env, &q.id, temperature, s)?);
        }
        let steps = (n * self.env.depth()) as u64;
        Ok((out, CostLedger::batch(n as u64, steps, self.per_step_cost)))
    }

    fn rollout(
        &self,
        q: &Question,
        prefix: &[String],
        count: RolloutCount,
        temperature: f64,
        seed: u64,
    ) -> Result<RolloutResult> {
        Self::check_temperature(temperature)?;
        let (prefix_actions, _) = self.env.walk(&q.id, prefix)?;
        let remaining = self.env.depth() - prefix_actions.len();
        let suffixes = match count {
            RolloutCount::Exhaustive => self.env.enumerate_completions(&q.id, prefix)?,
            RolloutCount::Sampled(k) => {
                if k == 0 {
                    return Err(Error::InvalidArgument("rollout count must be >= 1".into()));
                }
                (0..k)
                    .map(|i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&i.to_string()]));
                        self.policy.complete(&self.env, &q.id, &prefix_actions, temperature, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let completions = suffixes
            .iter()
            .enumerate()
            .map(|(i, actions)| {
                let mut t = self.env.trajectory_from_actions(
                    &q.id,
                    actions,
                    TrajectorySource::RolloutExtension,
                    derive_seed(seed, &[&i.to_string()]),
                )?;
                // keep the caller's exact prefix bytes
                t.steps[..prefix.len()].clone_from_slice(prefix);
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = completions.len() as u64;
        Ok(RolloutResult { completions, ledger: CostLedger::batch(n, n * remaining as u64, self.per_step_cost) })
    }

    fn rollout_answers(
        &self,
        q: &Question,
        prefix: &[String],
        count: RolloutCount,
        temperature: f64,
        seed: u64,
    ) -> Result<(Vec<String>, CostLedger)> {
        match count {
            RolloutCount::Exhaustive => {
                Self::check_temperature(temperature)?;
                let (actions, state) = self.env.walk(&q.id, prefix)?;
                let remaining = self.env.depth() - actions.len();
                let n = (self.env.branching() as u64).pow(remaining as u32);
                let answers = self.env.oracle().reachable(state).iter().cloned().collect();
                Ok((answers, CostLedger::batch(n, n * remaining as u64, self.per_step_cost)))
            }
            RolloutCount::Sampled(_) => {
                let r = self.rollout(q, prefix, count, temperature, seed)?;
                Ok((r.completions.into_iter().map(|c| c.final_answer).collect(), r.ledger))
            }
        }
    }
}
