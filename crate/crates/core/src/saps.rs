//! Verifier-guided first-error detection with two-rollout self-verification.
//!
//! The verifier's scores locate a candidate first error `t̂` at the largest
//! drop between consecutive steps. The reasoner then checks the prefixes
//! ending at `t̂-1` and `t̂` with one rollout batch each and the pre-assigned
//! labels are corrected according to what it finds:
//!
//! | `c(t̂-1)` | `c(t̂)` | case        | correction            |
//! |----------|--------|-------------|-----------------------|
//! | 1        | 0      | exact       | none                  |
//! | 1        | 1      | late flag   | label `t̂` becomes 1   |
//! | 0        | 0      | early flag  | label `t̂-1` becomes 0 |
//! | 0        | 1      | anomaly     | treated as late flag  |
//!
//! Completions from the `t̂` batch are retained as extra labeled
//! trajectories when their outcome agrees with `c(t̂)`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::{canonical_key, derive_seed};
use crate::ledger::CostLedger;
use crate::reasoner::{Reasoner, RolloutCount, RolloutResult};
use crate::records::Provenance;
use crate::types::{LabelSequence, Question, ScoreSequence, Trajectory};
use crate::verifier::{StepLabelDataset, StepScorer};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Candidate first error; `None` only for a single step scored at or
    /// above the threshold.
    pub t_hat: Option<usize>,
    /// `Δ_j = score(j-1) - score(j)` for `j = 1..=m`.
    pub deltas: Vec<f64>,
    pub preassigned: LabelSequence,
}

pub fn detect_first_error(scores: &ScoreSequence, threshold: f64) -> Result<DetectionResult> {
    let s = scores.as_slice();
    if s.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let deltas: Vec<f64> = s.windows(2).map(|w| w[0] - w[1]).collect();
    let t_hat = if deltas.is_empty() {
        (s[0] < threshold).then_some(0)
    } else {
        let mut best = 0;
        for (k, d) in deltas.iter().enumerate() {
            if *d > deltas[best] {
                best = k;
            }
        }
        Some(best + 1)
    };
    let preassigned = LabelSequence::with_first_error(s.len(), t_hat)?;
    Ok(DetectionResult { t_hat, deltas, preassigned })
}

/// Labels a verifier assigns before any rollout: the detected first error
/// for a wrong final answer, the first sub-threshold score otherwise.
pub fn preassign(scores: &ScoreSequence, final_correct: bool, threshold: f64) -> Result<LabelSequence> {
    if final_correct {
        let fe = scores.as_slice().iter().position(|s| *s < threshold);
        LabelSequence::with_first_error(scores.len(), fe)
    } else {
        Ok(detect_first_error(scores, threshold)?.preassigned)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationCase {
    AExact,
    BLateFlag,
    CEarlyFlag,
    Anomaly,
}

impl VerificationCase {
    pub fn from_checks(c_prev: u8, c_hat: u8) -> Self {
        match (c_prev, c_hat) {
            (1, 0) => VerificationCase::AExact,
            (1, _) => VerificationCase::BLateFlag,
            (_, 0) => VerificationCase::CEarlyFlag,
            _ => VerificationCase::Anomaly,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerificationCase::AExact => "a_exact",
            VerificationCase::BLateFlag => "b_late_flag",
            VerificationCase::CEarlyFlag => "c_early_flag",
            VerificationCase::Anomaly => "anomaly",
        }
    }
}

/// Sampling settings shared by every rollout of a labeling call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub count: RolloutCount,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    pub t_hat: usize,
    pub case: VerificationCase,
    pub c_prev: u8,
    pub c_hat: u8,
    pub corrected: LabelSequence,
    /// Rollouts from `s_(0:t̂-1)` and `s_(0:t̂)`.
    pub rollouts: (RolloutResult, RolloutResult),
    pub ledger: CostLedger,
}

fn correct_count(q: &Question, r: &RolloutResult) -> u8 {
    u8::from(r.completions.iter().any(|c| q.is_correct(&c.final_answer)))
}

/// Checks the prefixes at `t_hat - 1` and `t_hat` with one rollout batch
/// each and corrects the pre-assigned labels.
pub fn self_verify(
    reasoner: &dyn Reasoner,
    q: &Question,
    trajectory: &Trajectory,
    t_hat: usize,
    settings: RolloutSettings,
) -> Result<VerificationOutcome> {
    let m = trajectory.last_index();
    if t_hat == 0 || t_hat > m {
        return Err(Error::InvalidArgument(format!("t_hat {t_hat} outside 1..={m}")));
    }
    let roll = |j: usize| {
        let seed = derive_seed(settings.seed, &["verify", &j.to_string()]);
        reasoner.rollout(q, trajectory.prefix(j), settings.count, settings.temperature, seed)
    };
    let prev = roll(t_hat - 1)?;
    let hat = roll(t_hat)?;
    let (c_prev, c_hat) = (correct_count(q, &prev), correct_count(q, &hat));
    let case = VerificationCase::from_checks(c_prev, c_hat);
    let first_error = match case {
        VerificationCase::AExact => Some(t_hat),
        VerificationCase::BLateFlag | VerificationCase::Anomaly => (t_hat < m).then_some(t_hat + 1),
        VerificationCase::CEarlyFlag => Some(t_hat - 1),
    };
    let corrected = LabelSequence::with_first_error(trajectory.len(), first_error)?;
    let ledger = prev.ledger + hat.ledger;
    Ok(VerificationOutcome { t_hat, case, c_prev, c_hat, corrected, rollouts: (prev, hat), ledger })
}

/// A rollout completion kept as training data: positions `from..=m` carry
/// `label`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub trajectory: Trajectory,
    pub from: usize,
    pub label: u8,
}

impl Expansion {
    pub fn labels(&self) -> Result<LabelSequence> {
        let fe = if self.label == 1 { None } else { Some(self.from) };
        LabelSequence::with_first_error(self.trajectory.len(), fe)
    }
}

/// Retains completions of the `t̂` batch: gold-reaching ones become
/// all-correct trajectories when `c(t̂) = 1`; wrong ones are labeled 0 from
/// `t̂` on when `c(t̂) = 0`. Duplicates are dropped.
pub fn expand(outcome: &VerificationOutcome, q: &Question) -> Vec<Expansion> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in &outcome.rollouts.1.completions {
        let correct = q.is_correct(&c.final_answer);
        let keep = if outcome.c_hat == 1 { correct } else { !correct };
        if keep && seen.insert(canonical_key(c)) {
            let (from, label) = if outcome.c_hat == 1 { (0, 1) } else { (outcome.t_hat, 0) };
            out.push(Expansion { trajectory: c.clone(), from, label });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SapsResult {
    pub labels: LabelSequence,
    /// Absent when the final answer was correct.
    pub detection: Option<DetectionResult>,
    pub verification: Option<VerificationOutcome>,
    pub expansions: Vec<Expansion>,
    pub ledger: CostLedger,
}

impl SapsResult {
    /// Label records for the trajectory (`saps` or `outcome_only`) and its
    /// expansions (`expansion`).
    pub fn to_dataset(&self, trajectory: &Trajectory) -> Result<StepLabelDataset> {
        let mut d = StepLabelDataset::new();
        let prov = if self.detection.is_some() { Provenance::Saps } else { Provenance::OutcomeOnly };
        d.push_trajectory(trajectory, &self.labels, 0, prov)?;
        for e in &self.expansions {
            d.push_trajectory(&e.trajectory, &e.labels()?, e.from, Provenance::Expansion)?;
        }
        Ok(d)
    }
}

/// Full labeling of one trajectory. Correct final answers are labeled
/// all-correct with no rollouts; otherwise score, detect, verify, expand.
pub fn saps_label(
    reasoner: &dyn Reasoner,
    scorer: &dyn StepScorer,
    q: &Question,
    trajectory: &Trajectory,
    threshold: f64,
    settings: RolloutSettings,
) -> Result<SapsResult> {
    if q.id != trajectory.question_id {
        return Err(Error::InvalidArgument(format!(
            "trajectory belongs to {}, not {}",
            trajectory.question_id, q.id
        )));
    }
    if q.is_correct(&trajectory.final_answer) {
        return Ok(SapsResult {
            labels: LabelSequence::all_correct(trajectory.len())?,
            detection: None,
            verification: None,
            expansions: Vec::new(),
            ledger: CostLedger::default(),
        });
    }
    let scores = scorer.score(&trajectory.question_id, &trajectory.steps)?;
    let detection = detect_first_error(&scores, threshold)?;
    if trajectory.last_index() == 0 {
        // no score difference exists; one rollout settles the only step
        let seed = derive_seed(settings.seed, &["verify", "0"]);
        let r = reasoner.rollout(q, trajectory.prefix(0), settings.count, settings.temperature, seed)?;
        let c = correct_count(q, &r);
        return Ok(SapsResult {
            labels: LabelSequence::from_labels(vec![c])?,
            detection: Some(detection),
            verification: None,
            expansions: Vec::new(),
            ledger: r.ledger,
        });
    }
    let t_hat = detection.t_hat.expect("multi-step detection always yields a candidate");
    let outcome = self_verify(reasoner, q, trajectory, t_hat, settings)?;
    let expansions = expand(&outcome, q);
    Ok(SapsResult {
        labels: outcome.corrected.clone(),
        ledger: outcome.ledger,
        detection: Some(detection),
        verification: Some(outcome),
        expansions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(s: &[f64]) -> DetectionResult {
        detect_first_error(&ScoreSequence::new(s.to_vec()).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn largest_drop_is_the_candidate() {
        let d = det(&[0.9, 0.8, 0.2, 0.1]);
        assert_eq!(d.t_hat, Some(2));
        assert_eq!(d.preassigned.labels(), &[1, 1, 0, 0]);
        let expect = [0.1, 0.6, 0.1];
        for (a, b) in d.deltas.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let d = det(&[1.0, 0.5, 0.0]);
        assert_eq!(d.deltas, vec![0.5, 0.5]);
        assert_eq!(d.t_hat, Some(1));
    }

    #[test]
    fn rising_scores_still_pick_least_negative_drop() {
        let d = det(&[0.2, 0.4, 0.9]);
        assert!(d.deltas.iter().all(|x| *x < 0.0));
        assert_eq!(d.t_hat, Some(1));
    }

    #[test]
    fn single_step_uses_the_threshold() {
        assert_eq!(det(&[0.3]).t_hat, Some(0));
        assert_eq!(det(&[0.5]).t_hat, None);
        assert_eq!(det(&[0.5]).preassigned.labels(), &[1]);
        assert!(detect_first_error(&ScoreSequence::new(vec![]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn constant_shift_keeps_the_candidate() {
        let base = [0.7, 0.6, 0.3, 0.25, 0.2];
        let shifted: Vec<f64> = base.iter().map(|x| x + 0.125).collect();
        assert_eq!(det(&base).t_hat, det(&shifted).t_hat);
    }

    #[test]
    fn case_table() {
        assert_eq!(VerificationCase::from_checks(1, 0), VerificationCase::AExact);
        assert_eq!(VerificationCase::from_checks(1, 1), VerificationCase::BLateFlag);
        assert_eq!(VerificationCase::from_checks(0, 0), VerificationCase::CEarlyFlag);
        assert_eq!(VerificationCase::from_checks(0, 1), VerificationCase::Anomaly);
    }
}
