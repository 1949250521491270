use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthEnv;
use crate::error::{Error, Result};
use crate::types::{Trajectory, TrajectorySource};

const POLICY_FORMAT_VERSION: u32 = 1;

/// Tabular softmax policy: one logit per (state, action).
///
/// The action distribution at a state is `softmax(logits / temperature)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub version: u32,
    pub branching: usize,
    pub logits: Vec<f64>,
}

impl PolicyParams {
    pub fn uniform(env: &SynthEnv) -> Self {
        PolicyParams {
            version: POLICY_FORMAT_VERSION,
            branching: env.branching(),
            logits: vec![0.0; env.num_states() * env.branching()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn check_compatible(&self, env: &SynthEnv) -> Result<()> {
        if self.branching != env.branching() || self.logits.len() != env.num_states() * env.branching() {
            return Err(Error::InvalidArgument(format!(
                "policy shape ({} logits, branching {}) does not match env ({} states, branching {})",
                self.logits.len(),
                self.branching,
                env.num_states(),
                env.branching()
            )));
        }
        if let Some(v) = self.logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite logit {v}")));
        }
        Ok(())
    }

    pub fn state_logits(&self, state: usize) -> &[f64] {
        &self.logits[state * self.branching..(state + 1) * self.branching]
    }

    pub fn state_logits_mut(&mut self, state: usize) -> &mut [f64] {
        &mut self.logits[state * self.branching..(state + 1) * self.branching]
    }

    /// Log-probabilities of each action at `state`, computed with a shifted
    /// log-sum-exp so large logits never overflow.
    pub fn log_probs(&self, state: usize, temperature: f64) -> Vec<f64> {
        let z: Vec<f64> = self.state_logits(state).iter().map(|l| l / temperature).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, state: usize, temperature: f64) -> Vec<f64> {
        self.log_probs(state, temperature).into_iter().map(f64::exp).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: PolicyParams = serde_json::from_str(&text)?;
        if p.version != POLICY_FORMAT_VERSION {
            return Err(Error::Checkpoint { path: path.into(), reason: format!("unsupported version {}", p.version) });
        }
        Ok(p)
    }

    fn sample_action(&self, state: usize, temperature: f64, rng: &mut impl Rng) -> usize {
        let probs = self.probs(state, temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    /// Continues `prefix_actions` to a terminal state by sampling.
    pub fn complete(
        &self,
        env: &SynthEnv,
        question_id: &str,
        prefix_actions: &[usize],
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let q = env.question(question_id)?;
        let mut state = q.root;
        for &a in prefix_actions {
            state = env.successor(state, a);
        }
        let mut actions = prefix_actions.to_vec();
        while !env.is_terminal(state) {
            let a = self.sample_action(state, temperature, rng);
            actions.push(a);
            state = env.successor(state, a);
        }
        Ok(actions)
    }

    /// Samples a full trajectory; the same seed always yields the same path.
    pub fn sample_trajectory(
        &self,
        env: &SynthEnv,
        question_id: &str,
        temperature: f64,
        seed: u64,
    ) -> Result<Trajectory> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actions = self.complete(env, question_id, &[], temperature, &mut rng)?;
        env.trajectory_from_actions(question_id, &actions, TrajectorySource::Sampled, seed)
    }

    /// Argmax decoding; ties go to the lowest action id.
    pub fn greedy_trajectory(&self, env: &SynthEnv, question_id: &str) -> Result<Trajectory> {
        let q = env.question(question_id)?;
        let mut state = q.root;
        let mut actions = Vec::with_capacity(env.depth());
        while !env.is_terminal(state) {
            let logits = self.state_logits(state);
            let mut best = 0;
            for a in 1..logits.len() {
                if logits[a] > logits[best] {
                    best = a;
                }
            }
            actions.push(best);
            state = env.successor(state, best);
        }
        env.trajectory_from_actions(question_id, &actions, TrajectorySource::Sampled, 0)
    }

    /// `log P(steps | q)` as the sum of per-step log-softmax terms.
    pub fn trajectory_log_prob<S: AsRef<str>>(
        &self,
        env: &SynthEnv,
        question_id: &str,
        steps: &[S],
        temperature: f64,
    ) -> Result<f64> {
        let (actions, _) = env.walk(question_id, steps)?;
        let mut state = env.question(question_id)?.root;
        let mut lp = 0.0;
        for a in actions {
            lp += self.log_probs(state, temperature)[a];
            state = env.successor(state, a);
        }
        Ok(lp)
    }

    pub fn trajectory_prob<S: AsRef<str>>(
        &self,
        env: &SynthEnv,
        question_id: &str,
        steps: &[S],
        temperature: f64,
    ) -> Result<f64> {
        Ok(self.trajectory_log_prob(env, question_id, steps, temperature)?.exp())
    }

    /// Adds `scale * d log P(steps | q) / d logits` into `grad`.
    pub fn accumulate_log_prob_grad<S: AsRef<str>>(
        &self,
        env: &SynthEnv,
        question_id: &str,
        steps: &[S],
        temperature: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let (actions, _) = env.walk(question_id, steps)?;
        let mut state = env.question(question_id)?.root;
        let b = self.branching;
        for a in actions {
            let probs = self.probs(state, temperature);
            for (k, p) in probs.iter().enumerate() {
                let indicator = if k == a { 1.0 } else { 0.0 };
                grad[state * b + k] += scale * (indicator - p) / temperature;
            }
            state = env.successor(state, a);
        }
        Ok(())
    }

    /// Mean log-likelihood of the demonstrations at temperature 1.
    pub fn mean_log_likelihood(&self, env: &SynthEnv, demos: &[Trajectory]) -> Result<f64> {
        if demos.is_empty() {
            return Err(Error::Empty("demonstrations"));
        }
        let mut total = 0.0;
        for d in demos {
            total += self.trajectory_log_prob(env, &d.question_id, &d.steps, 1.0)?;
        }
        Ok(total / demos.len() as f64)
    }

    /// Gradient of [`Self::mean_log_likelihood`] with respect to every logit.
    pub fn mean_log_likelihood_grad(&self, env: &SynthEnv, demos: &[Trajectory]) -> Result<Vec<f64>> {
        if demos.is_empty() {
            return Err(Error::Empty("demonstrations"));
        }
        let mut grad = vec![0.0; self.logits.len()];
        let scale = 1.0 / demos.len() as f64;
        for d in demos {
            self.accumulate_log_prob_grad(env, &d.question_id, &d.steps, 1.0, scale, &mut grad)?;
        }
        Ok(grad)
    }

    /// Full-batch gradient ascent on the mean demo log-likelihood.
    pub fn sft_update(&self, env: &SynthEnv, demos: &[Trajectory], learning_rate: f64, epochs: usize) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::Empty("demonstrations"));
        }
        self.check_compatible(env)?;
        let mut p = self.clone();
        for _ in 0..epochs {
            let grad = p.mean_log_likelihood_grad(env, demos)?;
            for (l, g) in p.logits.iter_mut().zip(&grad) {
                *l += learning_rate * g;
            }
        }
        Ok(p)
    }
}

/// Fraction of questions whose greedy path ends at the gold answer.
pub fn greedy_pass_rate(env: &SynthEnv, policy: &PolicyParams) -> Result<f64> {
    let qs = env.env_questions();
    let mut pass = 0usize;
    for q in qs {
        let t = policy.greedy_trajectory(env, &q.id)?;
        if t.final_answer == q.gold_answer {
            pass += 1;
        }
    }
    Ok(pass as f64 / qs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{action_step, EnvParams};

    fn env(depth: usize, branching: usize) -> SynthEnv {
        SynthEnv::generate(&EnvParams { depth, branching, questions: 2, seed: 5, ..Default::default() }).unwrap()
    }

    #[test]
    fn uniform_depth3_branching2_has_prob_one_eighth() {
        let e = env(3, 2);
        let p = PolicyParams::uniform(&e);
        let prob = p.trajectory_prob(&e, "q000", &["a0", "a1", "a1"], 1.0).unwrap();
        assert!((prob - 0.125).abs() < 1e-15);
    }

    #[test]
    fn probabilities_over_all_paths_sum_to_one() {
        let e = env(4, 3);
        let mut p = PolicyParams::uniform(&e);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in p.logits.iter_mut() {
            *l = rng.random_range(-3.0..3.0);
        }
        for s in 0..e.num_states() {
            assert!((p.probs(s, 0.7).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let total: f64 = e
            .enumerate_completions::<&str>("q001", &[])
            .unwrap()
            .iter()
            .map(|acts| {
                let steps: Vec<String> = acts.iter().map(|&a| action_step(a)).collect();
                p.trajectory_prob(&e, "q001", &steps, 0.7).unwrap()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
    }

    #[test]
    fn raising_a_chosen_logit_raises_probability() {
        let e = env(3, 3);
        let mut p = PolicyParams::uniform(&e);
        let steps = ["a2", "a0", "a1"];
        let before = p.trajectory_prob(&e, "q000", &steps, 1.0).unwrap();
        let root = e.question("q000").unwrap().root;
        p.state_logits_mut(root)[2] += 0.3;
        assert!(p.trajectory_prob(&e, "q000", &steps, 1.0).unwrap() > before);
    }

    #[test]
    fn sampling_is_seeded_and_respects_temperature_domain() {
        let e = env(5, 3);
        let p = PolicyParams::uniform(&e);
        let a = p.sample_trajectory(&e, "q000", 1.0, 42).unwrap();
        let b = p.sample_trajectory(&e, "q000", 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert!(p.sample_trajectory(&e, "q000", 0.0, 1).is_err());
        assert!(p.sample_trajectory(&e, "q000", -1.0, 1).is_err());
    }

    #[test]
    fn uniform_first_action_frequencies() {
        let e = env(2, 3);
        let p = PolicyParams::uniform(&e);
        let mut counts = [0usize; 3];
        for seed in 0..10_000 {
            let t = p.sample_trajectory(&e, "q000", 1.0, seed).unwrap();
            counts[crate::synthenv::parse_action(&t.steps[0]).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 1.0 / 3.0).abs() <= 0.02, "freq {freq}");
        }
    }

    #[test]
    fn dominant_logit_always_chosen() {
        let e = env(2, 3);
        let mut p = PolicyParams::uniform(&e);
        let root = e.question("q000").unwrap().root;
        p.state_logits_mut(root)[1] = 50.0;
        for seed in 0..1000 {
            let t = p.sample_trajectory(&e, "q000", 1.0, seed).unwrap();
            assert_eq!(t.steps[0], "a1");
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let e = env(3, 3);
        let mut p = PolicyParams::uniform(&e);
        for (i, l) in p.logits.iter_mut().enumerate() {
            *l = if i % 2 == 0 { 50.0 } else { -50.0 };
        }
        let lp = p.trajectory_log_prob(&e, "q000", &["a1", "a1", "a1"], 0.1).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn sft_fits_single_demo_and_zero_rate_is_identity() {
        let e = env(4, 3);
        let p = PolicyParams::uniform(&e);
        let demo = e.demo_trajectory("q000", 3).unwrap();
        let trained = p.sft_update(&e, std::slice::from_ref(&demo), 1.0, 400).unwrap();
        assert!(trained.trajectory_prob(&e, "q000", &demo.steps, 1.0).unwrap() >= 0.99);
        let same = p.sft_update(&e, std::slice::from_ref(&demo), 0.0, 10).unwrap();
        assert_eq!(same, p);
        assert!(matches!(p.sft_update(&e, &[], 1.0, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn sft_log_likelihood_does_not_decrease() {
        let e = env(4, 3);
        let demos: Vec<_> = ["q000", "q001"].iter().map(|q| e.demo_trajectory(q, 8).unwrap()).collect();
        let mut p = PolicyParams::uniform(&e);
        let mut prev = p.mean_log_likelihood(&e, &demos).unwrap();
        for _ in 0..20 {
            p = p.sft_update(&e, &demos, 0.2, 1).unwrap();
            let ll = p.mean_log_likelihood(&e, &demos).unwrap();
            assert!(ll >= prev - 1e-12);
            prev = ll;
        }
    }
}
