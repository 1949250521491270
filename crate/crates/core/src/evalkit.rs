//! Evaluation metrics and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::{canonical_key, derive_seed};
use crate::ledger::CostLedger;
use crate::prefs::trajectory_reward;
use crate::reasoner::{mc_step_correct, Reasoner, RolloutCount};
use crate::records::BenchmarkRecord;
use crate::saps::detect_first_error;
use crate::synthenv::SynthEnv;
use crate::types::{LabelSequence, Question, ScoreSequence, Trajectory};
use crate::verifier::StepScorer;

/// Scores 1 for prefixes that can still reach the gold answer and 0
/// otherwise, straight from the environment.
pub struct OracleScorer<'a> {
    pub env: &'a SynthEnv,
}

impl StepScorer for OracleScorer<'_> {
    fn score(&self, question_id: &str, steps: &[String]) -> Result<ScoreSequence> {
        let labels = (0..steps.len())
            .map(|j| self.env.oracle_step_label(question_id, &steps[..=j]).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        ScoreSequence::new(labels)
    }
}

/// Same score for every prefix.
pub struct ConstantScorer(pub f64);

impl StepScorer for ConstantScorer {
    fn score(&self, _question_id: &str, steps: &[String]) -> Result<ScoreSequence> {
        ScoreSequence::new(vec![self.0; steps.len()])
    }
}

/// How a predicted first error is read off step scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstErrorRule {
    /// Lowest index whose score is below the threshold.
    #[default]
    Threshold,
    /// Largest drop between consecutive scores.
    DeltaArgmax,
}

pub fn predicted_first_error(scores: &ScoreSequence, threshold: f64, rule: FirstErrorRule) -> Result<Option<usize>> {
    match rule {
        FirstErrorRule::Threshold => Ok(scores.as_slice().iter().position(|s| *s < threshold)),
        FirstErrorRule::DeltaArgmax => Ok(detect_first_error(scores, threshold)?.t_hat),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDetail {
    pub question_id: String,
    pub annotated: i64,
    pub predicted: i64,
    pub correct: bool,
    pub steps_correct: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracy {
    /// Fraction of evaluated records whose predicted first error equals the
    /// annotated one.
    pub accuracy: f64,
    /// Fraction of individual step labels that agree with the annotation.
    pub per_step_accuracy: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub details: Vec<RecordDetail>,
}

fn as_index(fe: Option<usize>) -> i64 {
    fe.map_or(-1, |v| v as i64)
}

/// First-error exact-match accuracy on a process benchmark. Records that
/// fail validation or scoring are skipped and counted.
pub fn step_accuracy(
    scorer: &dyn StepScorer,
    benchmark: &[BenchmarkRecord],
    threshold: f64,
    rule: FirstErrorRule,
) -> Result<StepAccuracy> {
    if benchmark.is_empty() {
        return Err(Error::Empty("benchmark"));
    }
    let mut details = Vec::new();
    let mut skipped = 0;
    for r in benchmark {
        let scores = match r.validate().and_then(|_| scorer.score(&r.question_id, &r.steps)) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(question = %r.question_id, error = %e, "skipping benchmark record");
                skipped += 1;
                continue;
            }
        };
        let predicted = predicted_first_error(&scores, threshold, rule)?;
        let annotated = LabelSequence::with_first_error(r.steps.len(), r.annotated_first_error())?;
        let steps_correct = scores.thresholded(threshold).iter().zip(annotated.labels()).filter(|(a, b)| a == b).count();
        details.push(RecordDetail {
            question_id: r.question_id.clone(),
            annotated: r.first_error,
            predicted: as_index(predicted),
            correct: as_index(predicted) == r.first_error,
            steps_correct,
            steps: r.steps.len(),
        });
    }
    let evaluated = details.len();
    let hits = details.iter().filter(|d| d.correct).count();
    let step_hits: usize = details.iter().map(|d| d.steps_correct).sum();
    let steps: usize = details.iter().map(|d| d.steps).sum();
    Ok(StepAccuracy {
        accuracy: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        per_step_accuracy: if steps == 0 { 0.0 } else { step_hits as f64 / steps as f64 },
        evaluated,
        skipped,
        details,
    })
}

/// Share of trajectories whose pre-assigned labels locate the first error
/// wrongly. A pre-assignment counts as right when it matches the reference
/// first error: none for a correct result, the exact position otherwise.
pub fn self_verification_error_rate(preassigned: &[LabelSequence], oracle: &[LabelSequence], final_correct: &[bool]) -> Result<f64> {
    if preassigned.len() != oracle.len() || oracle.len() != final_correct.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} pre-assigned, {} oracle, {} outcomes",
            preassigned.len(),
            oracle.len(),
            final_correct.len()
        )));
    }
    if preassigned.is_empty() {
        return Err(Error::Empty("label sequences"));
    }
    let mut wrong = 0usize;
    for ((p, o), &ok) in preassigned.iter().zip(oracle).zip(final_correct) {
        if p.len() != o.len() {
            return Err(Error::InvalidArgument(format!("label lengths {} and {} differ", p.len(), o.len())));
        }
        let right = if ok {
            p.first_error().is_none() && o.first_error().is_none()
        } else {
            p.first_error() == o.first_error()
        };
        wrong += usize::from(!right);
    }
    Ok(wrong as f64 / preassigned.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonResult {
    pub accuracy: f64,
    pub evaluated: usize,
    /// Questions with no trajectories or no gold answer.
    pub skipped: Vec<String>,
}

/// Best-of-N: per question, the trajectory with the highest mean step score
/// (ties to the lowest canonical key) is checked against the gold answer.
pub fn bon_accuracy(
    scorer: &dyn StepScorer,
    groups: &BTreeMap<String, Vec<Trajectory>>,
    gold: &BTreeMap<String, String>,
) -> Result<BonResult> {
    let mut skipped = Vec::new();
    let (mut hits, mut evaluated) = (0usize, 0usize);
    for (qid, ts) in groups {
        let Some(answer) = gold.get(qid) else {
            skipped.push(qid.clone());
            continue;
        };
        if ts.is_empty() {
            skipped.push(qid.clone());
            continue;
        }
        let mut best: Option<(f64, String, &Trajectory)> = None;
        for t in ts {
            let r = trajectory_reward(&scorer.score(&t.question_id, &t.steps)?)?;
            let key = canonical_key(t);
            let better = match &best {
                None => true,
                Some((br, bk, _)) => r > *br || (r == *br && key < *bk),
            };
            if better {
                best = Some((r, key, t));
            }
        }
        let (_, _, chosen) = best.expect("non-empty group");
        evaluated += 1;
        hits += usize::from(chosen.final_answer.trim() == answer.trim());
    }
    Ok(BonResult { accuracy: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 }, evaluated, skipped })
}

/// Fraction of questions whose first listed trajectory is correct.
pub fn pass_at_1(groups: &BTreeMap<String, Vec<Trajectory>>, gold: &BTreeMap<String, String>) -> f64 {
    let mut n = 0usize;
    let mut hits = 0usize;
    for (qid, ts) in groups {
        if let (Some(t), Some(g)) = (ts.first(), gold.get(qid)) {
            n += 1;
            hits += usize::from(t.final_answer.trim() == g.trim());
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub gap: f64,
    pub prefixes: usize,
    pub ledger: CostLedger,
}

/// Mean absolute disagreement between thresholded verifier labels and
/// Monte Carlo labels over every prefix of every probe trajectory.
#[allow(clippy::too_many_arguments)]
pub fn reasoner_verifier_gap(
    scorer: &dyn StepScorer,
    reasoner: &dyn Reasoner,
    questions: &[Question],
    probe: &[Trajectory],
    count: RolloutCount,
    threshold: f64,
    temperature: f64,
    seed: u64,
) -> Result<GapReport> {
    if probe.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let by_id: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut diff = 0usize;
    let mut prefixes = 0usize;
    let mut ledger = CostLedger::default();
    for (i, t) in probe.iter().enumerate() {
        let q = by_id.get(t.question_id.as_str()).ok_or_else(|| Error::UnknownQuestion(t.question_id.clone()))?;
        let v = scorer.score(&t.question_id, &t.steps)?.thresholded(threshold);
        for (j, vj) in v.iter().enumerate() {
            let s = derive_seed(seed, &["gap", &i.to_string(), &j.to_string()]);
            let (c, l) = mc_step_correct(reasoner, q, t.prefix(j), count, temperature, s)?;
            ledger += l;
            diff += usize::from(c != *vj);
            prefixes += 1;
        }
    }
    Ok(GapReport { gap: diff as f64 / prefixes as f64, prefixes, ledger })
}

/// One row of the per-iteration metrics series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub pass_rate: f64,
    pub gap: f64,
    /// Absent when no trajectory was pre-assigned this iteration.
    pub sve_rate: Option<f64>,
    pub pool_size: usize,
    pub new_samples: usize,
    pub label_records: usize,
    pub pref_pairs: usize,
    pub flagged: usize,
    pub expansions: usize,
    pub case_a: usize,
    pub case_b: usize,
    pub case_c: usize,
    pub case_anomaly: usize,
    pub sample_rollouts: u64,
    pub sample_steps: u64,
    pub label_batches: u64,
    pub label_rollouts: u64,
    pub label_steps: u64,
    pub label_flops: f64,
    pub gap_batches: u64,
    pub verifier_loss: f64,
    pub align_loss: Option<f64>,
    pub wall_seconds: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<IterationMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const METRIC_COLUMNS: [&str; 24] = [
    "iteration",
    "pass_rate",
    "gap",
    "sve_rate",
    "pool_size",
    "new_samples",
    "label_records",
    "pref_pairs",
    "flagged",
    "expansions",
    "case_a",
    "case_b",
    "case_c",
    "case_anomaly",
    "sample_rollouts",
    "sample_steps",
    "label_batches",
    "label_rollouts",
    "label_steps",
    "label_flops",
    "gap_batches",
    "verifier_loss",
    "align_loss",
    "wall_seconds",
];

/// Writes `metrics.csv` and, for a non-empty series, three line plots:
/// gap, pass rate and labeling cost against iteration.
pub fn emit_report(metrics: &[IterationMetrics], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    write_metrics_csv(&csv_path, metrics)?;
    let mut files = vec![csv_path];
    if metrics.is_empty() {
        return Ok(files);
    }
    let xs: Vec<f64> = metrics.iter().map(|m| m.iteration as f64).collect();
    let plots: [(&str, &str, Vec<f64>); 3] = [
        ("gap.svg", "reasoner-verifier gap", metrics.iter().map(|m| m.gap).collect()),
        ("accuracy.svg", "greedy pass rate", metrics.iter().map(|m| m.pass_rate).collect()),
        ("cost.svg", "labeling flop proxy", metrics.iter().map(|m| m.label_flops).collect()),
    ];
    for (name, title, ys) in plots {
        let path = out_dir.join(name);
        std::fs::write(&path, line_plot_svg(title, "iteration", &xs, &ys)).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(files)
}

/// Minimal static SVG line chart with axis labels and min/max ticks.
pub fn line_plot_svg(title: &str, x_label: &str, xs: &[f64], ys: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if (hi - lo).abs() < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(xs);
    let (y0, y1) = span(ys);
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{L} {T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, (L + W - R) / 2.0, H - 12.0, escape(x_label));
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.4}</text>"#, L - 6.0);
    }
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{v}</text>"#, H - B + 16.0);
    }
    let pts: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" "));
    for (x, y) in xs.iter().zip(ys) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(*x), py(*y));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
