//! Domain records shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A problem with a canonical gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub gold_answer: String,
}

impl Question {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, gold: impl Into<String>) -> Result<Self> {
        let q = Question { id: id.into(), prompt: prompt.into(), gold_answer: gold.into() };
        if q.gold_answer.trim().is_empty() {
            return Err(Error::Schema(format!("question {} has an empty gold answer", q.id)));
        }
        Ok(q)
    }

    pub fn is_correct(&self, answer: &str) -> bool {
        answer.trim() == self.gold_answer.trim()
    }
}

/// Borrowed view of one reasoning step and its position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step<'a> {
    pub index: usize,
    pub content: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    Sampled,
    RolloutExtension,
    Demo,
}

/// A question id plus an ordered, non-empty list of reasoning steps.
///
/// Steps are indexed `0..=m`; the final answer is whatever the domain's answer
/// extractor read off the last step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub steps: Vec<String>,
    pub final_answer: String,
    pub source: TrajectorySource,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(
        question_id: impl Into<String>,
        steps: Vec<String>,
        final_answer: impl Into<String>,
        source: TrajectorySource,
        seed: u64,
    ) -> Result<Self> {
        let t = Trajectory {
            question_id: question_id.into(),
            steps,
            final_answer: final_answer.into(),
            source,
            seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Schema(format!("trajectory for {} has no steps", self.question_id)));
        }
        Ok(())
    }

    /// Index of the last step (`m`).
    pub fn last_index(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Steps `0..=j`.
    pub fn prefix(&self, j: usize) -> &[String] {
        &self.steps[..=j]
    }

    pub fn steps(&self) -> impl Iterator<Item = Step<'_>> {
        self.steps.iter().enumerate().map(|(index, s)| Step { index, content: s })
    }
}

/// Per-step correctness labels obeying the first-error convention: once a
/// step is wrong, every later step is wrong too.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabels", into = "RawLabels")]
pub struct LabelSequence {
    labels: Vec<u8>,
    first_error: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawLabels {
    labels: Vec<u8>,
    first_error: Option<usize>,
}

impl TryFrom<RawLabels> for LabelSequence {
    type Error = Error;

    fn try_from(raw: RawLabels) -> Result<Self> {
        let seq = LabelSequence::from_labels(raw.labels)?;
        if seq.first_error != raw.first_error {
            return Err(Error::Schema(format!(
                "first_error {:?} disagrees with labels (expected {:?})",
                raw.first_error, seq.first_error
            )));
        }
        Ok(seq)
    }
}

impl From<LabelSequence> for RawLabels {
    fn from(seq: LabelSequence) -> Self {
        RawLabels { labels: seq.labels, first_error: seq.first_error }
    }
}

impl LabelSequence {
    /// Validates values and monotonicity. Non-monotone input is rejected,
    /// never silently closed.
    pub fn from_labels(labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Schema("label sequence is empty".into()));
        }
        let mut first_error = None;
        for (j, &c) in labels.iter().enumerate() {
            match (c, first_error) {
                (0, None) => first_error = Some(j),
                (0, Some(_)) => {}
                (1, Some(zero)) => return Err(Error::NonMonotone { zero, one: j }),
                (1, None) => {}
                (v, _) => return Err(Error::Schema(format!("label value {v} at {j} is not 0 or 1"))),
            }
        }
        Ok(LabelSequence { labels, first_error })
    }

    /// Labels of length `len` with 1 before `first_error` and 0 from it on.
    pub fn with_first_error(len: usize, first_error: Option<usize>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Schema("label sequence is empty".into()));
        }
        if let Some(t) = first_error {
            if t >= len {
                return Err(Error::Schema(format!("first error {t} outside 0..{len}")));
            }
        }
        let cut = first_error.unwrap_or(len);
        let labels = (0..len).map(|j| u8::from(j < cut)).collect();
        Ok(LabelSequence { labels, first_error })
    }

    pub fn all_correct(len: usize) -> Result<Self> {
        Self::with_first_error(len, None)
    }

    /// Closes arbitrary 0/1 estimates into a monotone sequence by zeroing
    /// everything after the first 0.
    pub fn closed_from(raw: &[u8]) -> Result<Self> {
        let first = raw.iter().position(|&c| c == 0);
        Self::with_first_error(raw.len(), first)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn first_error(&self) -> Option<usize> {
        self.first_error
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, j: usize) -> Option<u8> {
        self.labels.get(j).copied()
    }
}

/// Verifier scores, one per step, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreSequence(Vec<f64>);

impl TryFrom<Vec<f64>> for ScoreSequence {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ScoreSequence::new(v)
    }
}

impl From<ScoreSequence> for Vec<f64> {
    fn from(s: ScoreSequence) -> Self {
        s.0
    }
}

impl ScoreSequence {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some((j, s)) = scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Schema(format!("score {s} at step {j} outside [0, 1]")));
        }
        Ok(ScoreSequence(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `label_j = 1` iff `score_j >= threshold`.
    pub fn thresholded(&self, threshold: f64) -> Vec<u8> {
        self.0.iter().map(|&s| u8::from(s >= threshold)).collect()
    }
}
