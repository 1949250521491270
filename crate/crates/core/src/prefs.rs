//! Trajectory rewards, preference pairs and odds-ratio preference alignment
//! of the tabular policy.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::keys::canonical_key;
use crate::records::PreferenceRecord;
use crate::synthenv::{PolicyParams, SynthEnv};
use crate::types::{ScoreSequence, Trajectory};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking
/// odds.
pub const PROB_EPS: f64 = 1e-12;

/// Absolute slack when comparing a reward gap against the threshold, so
/// that means of equal-looking scores are not split by rounding.
const GAP_TOLERANCE: f64 = 1e-12;

pub type PreferencePair = PreferenceRecord;

impl PreferenceRecord {
    pub fn gap(&self) -> f64 {
        self.reward_w - self.reward_l
    }
}

/// Mean of the step scores.
pub fn trajectory_reward(scores: &ScoreSequence) -> Result<f64> {
    let s = scores.as_slice();
    if s.is_empty() {
        return Err(Error::Empty("scores"));
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Pairs the best with the worst remaining trajectory of each question while
/// their reward gap is at least `eta`, up to `max_pairs_per_question`.
/// Within a question, trajectories are ordered by reward (descending) then
/// canonical key, and exact duplicates are dropped first. Questions come
/// out in id order.
pub fn build_pref_pairs(scored: &[(Trajectory, f64)], eta: f64, max_pairs_per_question: usize) -> Result<Vec<PreferencePair>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")));
    }
    let mut groups: BTreeMap<&str, Vec<(&Trajectory, f64, String)>> = BTreeMap::new();
    for (t, r) in scored {
        if !r.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite reward for {}", t.question_id)));
        }
        groups.entry(t.question_id.as_str()).or_default().push((t, *r, canonical_key(t)));
    }
    let mut out = Vec::new();
    for (qid, mut g) in groups {
        g.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.2.cmp(&b.2)));
        let mut seen = HashSet::new();
        g.retain(|e| seen.insert(e.2.clone()));
        if g.len() < 2 {
            continue;
        }
        let (mut i, mut k, mut made) = (0usize, g.len() - 1, 0usize);
        while i < k && made < max_pairs_per_question {
            let (w, l) = (&g[i], &g[k]);
            if w.1 - l.1 < eta - GAP_TOLERANCE {
                break;
            }
            out.push(PreferenceRecord {
                question_id: qid.to_string(),
                winner_steps: w.0.steps.clone(),
                loser_steps: l.0.steps.clone(),
                reward_w: w.1,
                reward_l: l.1,
            });
            made += 1;
            i += 1;
            k -= 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Odds {
    pub log_prob: f64,
    pub log_odds: f64,
    /// `d log_odds / d log_prob`; zero when the probability was clamped.
    pub dlog_odds: f64,
    pub clamped: bool,
}

impl Odds {
    pub fn value(&self) -> f64 {
        self.log_odds.exp()
    }

    /// Odds of a trajectory whose log-probability is `log_prob`.
    pub fn from_log_prob(log_prob: f64) -> Self {
        let lo = PROB_EPS.ln();
        let hi = (-PROB_EPS).ln_1p();
        let clamped = !(lo..=hi).contains(&log_prob);
        let lp = log_prob.clamp(lo, hi);
        let p = lp.exp();
        // log(P / (1 - P)) computed without forming 1 - P directly
        let log_odds = lp - (-p).ln_1p();
        let dlog_odds = if clamped { 0.0 } else { 1.0 / (1.0 - p) };
        Odds { log_prob: lp, log_odds, dlog_odds, clamped }
    }
}

pub fn odds_of(policy: &PolicyParams, env: &SynthEnv, question_id: &str, steps: &[String], temperature: f64) -> Result<Odds> {
    Ok(Odds::from_log_prob(policy.trajectory_log_prob(env, question_id, steps, temperature)?))
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrpoOutput {
    pub loss: f64,
    /// `-log P(winner)`.
    pub nll: f64,
    /// `-log σ(log odds(winner) - log odds(loser))`, before the β weight.
    pub odds_ratio_term: f64,
    pub grad: Vec<f64>,
    pub clamped: bool,
}

/// `-log P_w - β log σ(log odds_w - log odds_l)` and its gradient over every
/// policy logit.
pub fn orpo_loss(policy: &PolicyParams, env: &SynthEnv, pair: &PreferencePair, beta: f64, temperature: f64) -> Result<OrpoOutput> {
    let mut grad = vec![0.0; policy.num_params()];
    let out = orpo_accumulate(policy, env, pair, beta, temperature, 1.0, &mut grad)?;
    Ok(OrpoOutput { grad, ..out })
}

fn orpo_accumulate(
    policy: &PolicyParams,
    env: &SynthEnv,
    pair: &PreferencePair,
    beta: f64,
    temperature: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<OrpoOutput> {
    let q = &pair.question_id;
    let lp_w = policy.trajectory_log_prob(env, q, &pair.winner_steps, temperature)?;
    let lp_l = policy.trajectory_log_prob(env, q, &pair.loser_steps, temperature)?;
    let (ow, ol) = (Odds::from_log_prob(lp_w), Odds::from_log_prob(lp_l));
    let x = ow.log_odds - ol.log_odds;
    let ratio_term = -log_sigmoid(x);
    let nll = -lp_w;
    // d(-log σ(x))/dx = -σ(-x)
    let sig_neg = (log_sigmoid(-x)).exp();
    let coef_w = -1.0 - beta * sig_neg * ow.dlog_odds;
    let coef_l = beta * sig_neg * ol.dlog_odds;
    policy.accumulate_log_prob_grad(env, q, &pair.winner_steps, temperature, scale * coef_w, grad)?;
    if coef_l != 0.0 {
        policy.accumulate_log_prob_grad(env, q, &pair.loser_steps, temperature, scale * coef_l, grad)?;
    }
    Ok(OrpoOutput {
        loss: nll + beta * ratio_term,
        nll,
        odds_ratio_term: ratio_term,
        grad: Vec::new(),
        clamped: ow.clamped || ol.clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 || self.batch_size == 0 || self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("alignment needs lr >= 0, batch >= 1 and temperature > 0".into()));
        }
        Ok(())
    }
}

/// Mean ORPO loss over the pairs.
pub fn mean_orpo_loss(policy: &PolicyParams, env: &SynthEnv, pairs: &[PreferencePair], cfg: &AlignConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let mut scratch = vec![0.0; policy.num_params()];
    let mut total = 0.0;
    for p in pairs {
        total += orpo_accumulate(policy, env, p, cfg.beta, cfg.temperature, 0.0, &mut scratch)?.loss;
    }
    Ok(total / pairs.len() as f64)
}

/// Mini-batch gradient descent on the mean ORPO loss. Batch order depends
/// only on `cfg.seed`. Returns the full-data mean loss after each epoch.
pub fn align_update(
    policy: &PolicyParams,
    env: &SynthEnv,
    pairs: &[PreferencePair],
    cfg: &AlignConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    cfg.validate()?;
    policy.check_compatible(env)?;
    let mut p = policy.clone();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grad = vec![0.0; p.num_params()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                orpo_accumulate(&p, env, &pairs[k], cfg.beta, cfg.temperature, scale, &mut grad)?;
            }
            for (l, g) in p.logits.iter_mut().zip(&grad) {
                *l -= cfg.learning_rate * g;
            }
        }
        trace.push(mean_orpo_loss(&p, env, pairs, cfg)?);
    }
    Ok((p, trace))
}
