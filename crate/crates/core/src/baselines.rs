//! Reference labelers and the labeling-cost comparison harness.
//!
//! `shepherd_label` estimates every prefix independently; `omega_label`
//! binary-searches for the first incorrect prefix under the assumption that
//! correctness never recovers once lost.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::derive_seed;
use crate::ledger::CostLedger;
use crate::reasoner::{mc_step_correct, Reasoner};
use crate::saps::{saps_label, RolloutSettings};
use crate::types::{LabelSequence, Question, Trajectory};
use crate::verifier::StepScorer;

fn check_owner(q: &Question, t: &Trajectory) -> Result<()> {
    if q.id != t.question_id {
        return Err(Error::InvalidArgument(format!("trajectory belongs to {}, not {}", t.question_id, q.id)));
    }
    Ok(())
}

fn probe(reasoner: &dyn Reasoner, q: &Question, t: &Trajectory, j: usize, tag: &str, s: RolloutSettings) -> Result<(u8, CostLedger)> {
    let seed = derive_seed(s.seed, &[tag, &j.to_string()]);
    mc_step_correct(reasoner, q, t.prefix(j), s.count, s.temperature, seed)
}

/// One rollout batch per prefix `0..=m`, then closure at the first 0.
pub fn shepherd_label(
    reasoner: &dyn Reasoner,
    q: &Question,
    trajectory: &Trajectory,
    settings: RolloutSettings,
) -> Result<(LabelSequence, CostLedger)> {
    check_owner(q, trajectory)?;
    let mut raw = Vec::with_capacity(trajectory.len());
    let mut ledger = CostLedger::default();
    for j in 0..trajectory.len() {
        let (c, l) = probe(reasoner, q, trajectory, j, "shepherd", settings)?;
        raw.push(c);
        ledger += l;
    }
    Ok((LabelSequence::closed_from(&raw)?, ledger))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmegaResult {
    pub labels: LabelSequence,
    pub ledger: CostLedger,
    /// The confirmation probe after the located first error came back
    /// correct, so the monotonicity assumption failed on this trajectory.
    pub flagged: bool,
}

/// Maximum rollout batches `omega_label` spends on an `m+1`-step trajectory.
pub fn omega_batch_bound(m: usize) -> u64 {
    let mut bits = 0u64;
    while (1usize << bits) < m + 1 {
        bits += 1;
    }
    bits + 1
}

/// Binary search for the first prefix no completion of which reaches the
/// gold answer. The full trajectory is known to be wrong, so the search
/// interval is `[0, m]` with `m` certified. One extra probe right after the
/// located error checks the monotone assumption.
pub fn omega_label(
    reasoner: &dyn Reasoner,
    q: &Question,
    trajectory: &Trajectory,
    settings: RolloutSettings,
) -> Result<OmegaResult> {
    check_owner(q, trajectory)?;
    let n = trajectory.len();
    if q.is_correct(&trajectory.final_answer) {
        return Ok(OmegaResult {
            labels: LabelSequence::all_correct(n)?,
            ledger: CostLedger::default(),
            flagged: false,
        });
    }
    let m = n - 1;
    let mut probed = vec![false; n];
    let mut ledger = CostLedger::default();
    let (mut lo, mut hi) = (0usize, m);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let (c, l) = probe(reasoner, q, trajectory, mid, "omega", settings)?;
        probed[mid] = true;
        ledger += l;
        if c == 0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut flagged = false;
    if lo < m && !probed[lo + 1] {
        let (c, l) = probe(reasoner, q, trajectory, lo + 1, "omega", settings)?;
        ledger += l;
        flagged = c == 1;
    }
    Ok(OmegaResult { labels: LabelSequence::with_first_error(n, Some(lo))?, ledger, flagged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMethod {
    Saps,
    Shepherd,
    Omega,
}

impl LabelMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMethod::Saps => "saps",
            LabelMethod::Shepherd => "shepherd",
            LabelMethod::Omega => "omega",
        }
    }
}

impl std::str::FromStr for LabelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saps" => Ok(LabelMethod::Saps),
            "shepherd" => Ok(LabelMethod::Shepherd),
            "omega" => Ok(LabelMethod::Omega),
            _ => Err(Error::Config(format!("unknown labeling method `{s}`"))),
        }
    }
}

/// Labels of one trajectory by one method, with what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodLabels {
    pub labels: LabelSequence,
    pub ledger: CostLedger,
    pub flagged: bool,
}

pub fn label_with(
    method: LabelMethod,
    reasoner: &dyn Reasoner,
    scorer: &dyn StepScorer,
    q: &Question,
    trajectory: &Trajectory,
    threshold: f64,
    settings: RolloutSettings,
) -> Result<MethodLabels> {
    match method {
        LabelMethod::Saps => {
            let r = saps_label(reasoner, scorer, q, trajectory, threshold, settings)?;
            Ok(MethodLabels { labels: r.labels, ledger: r.ledger, flagged: false })
        }
        LabelMethod::Shepherd => {
            let (labels, ledger) = shepherd_label(reasoner, q, trajectory, settings)?;
            Ok(MethodLabels { labels, ledger, flagged: false })
        }
        LabelMethod::Omega => {
            let r = omega_label(reasoner, q, trajectory, settings)?;
            Ok(MethodLabels { labels: r.labels, ledger: r.ledger, flagged: r.flagged })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub trajectories: usize,
    pub failures: usize,
    pub flagged: usize,
    pub total: CostLedger,
    pub mean_rollout_batches: f64,
    pub mean_rollouts: f64,
    pub mean_flop_proxy: f64,
    pub mean_wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dataset: String,
    pub trajectories: usize,
    pub methods: BTreeMap<String, MethodCost>,
}

impl CostReport {
    pub fn method(&self, m: LabelMethod) -> Option<&MethodCost> {
        self.methods.get(m.as_str())
    }

    /// `numerator / denominator` of mean flop proxies.
    pub fn flop_ratio(&self, numerator: LabelMethod, denominator: LabelMethod) -> Option<f64> {
        Some(self.method(numerator)?.mean_flop_proxy / self.method(denominator)?.mean_flop_proxy)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per method: mean flops and seconds per labeled trajectory.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record([
            "method",
            "trajectories",
            "failures",
            "flagged",
            "mean_rollout_batches",
            "mean_rollouts",
            "mean_flop_proxy",
            "mean_wall_seconds",
        ])?;
        for (name, c) in &self.methods {
            w.write_record([
                name.clone(),
                c.trajectories.to_string(),
                c.failures.to_string(),
                c.flagged.to_string(),
                c.mean_rollout_batches.to_string(),
                c.mean_rollouts.to_string(),
                c.mean_flop_proxy.to_string(),
                c.mean_wall_seconds.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        w.into_inner().map_err(|e| Error::io(path, e.into_error()))?.flush().map_err(|e| Error::io(path, e))
    }
}

/// Inputs shared by every method in a cost comparison.
pub struct CostInputs<'a> {
    pub reasoner: &'a dyn Reasoner,
    pub scorer: &'a dyn StepScorer,
    pub questions: &'a [Question],
    pub trajectories: &'a [Trajectory],
    pub threshold: f64,
    pub settings: RolloutSettings,
    /// Wall time makes reports machine-dependent; off unless asked for.
    pub record_wall_time: bool,
    pub dataset: String,
}

/// Runs every method on the same trajectories with the same seeds and
/// aggregates per-trajectory means. Failed labelings are counted, not
/// fatal.
pub fn compare_costs(methods: &[LabelMethod], inputs: &CostInputs<'_>) -> Result<CostReport> {
    if methods.is_empty() {
        return Err(Error::Empty("labeling methods"));
    }
    if inputs.trajectories.is_empty() {
        return Err(Error::Empty("trajectories"));
    }
    let by_id: BTreeMap<&str, &Question> = inputs.questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut report = CostReport {
        dataset: inputs.dataset.clone(),
        trajectories: inputs.trajectories.len(),
        methods: BTreeMap::new(),
    };
    for &method in methods {
        let mut total = CostLedger::default();
        let (mut done, mut failures, mut flagged) = (0usize, 0usize, 0usize);
        for (i, t) in inputs.trajectories.iter().enumerate() {
            let Some(q) = by_id.get(t.question_id.as_str()) else {
                failures += 1;
                continue;
            };
            let settings = RolloutSettings { seed: derive_seed(inputs.settings.seed, &["traj", &i.to_string()]), ..inputs.settings };
            let start = Instant::now();
            match label_with(method, inputs.reasoner, inputs.scorer, q, t, inputs.threshold, settings) {
                Ok(r) => {
                    let secs = if inputs.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
                    total += r.ledger.with_wall_seconds(secs);
                    done += 1;
                    flagged += usize::from(r.flagged);
                }
                Err(e) => {
                    tracing::warn!(method = method.as_str(), question = %t.question_id, error = %e, "labeling failed");
                    failures += 1;
                }
            }
        }
        let denom = done.max(1) as f64;
        report.methods.insert(
            method.as_str().to_string(),
            MethodCost {
                trajectories: done,
                failures,
                flagged,
                mean_rollout_batches: total.rollout_batches as f64 / denom,
                mean_rollouts: total.rollouts as f64 / denom,
                mean_flop_proxy: total.flop_proxy / denom,
                mean_wall_seconds: total.wall_seconds / denom,
                total,
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_bound_matches_binary_search_depth() {
        assert_eq!(omega_batch_bound(0), 1);
        assert_eq!(omega_batch_bound(1), 2);
        assert_eq!(omega_batch_bound(7), 4);
        assert_eq!(omega_batch_bound(8), 5);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [LabelMethod::Saps, LabelMethod::Shepherd, LabelMethod::Omega] {
            assert_eq!(m.as_str().parse::<LabelMethod>().unwrap(), m);
        }
        assert!("mcts".parse::<LabelMethod>().unwrap_err().is_config());
    }
}
