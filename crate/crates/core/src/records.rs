//! JSONL exchange formats: one UTF-8 JSON record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a step label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OmegaInit,
    Saps,
    Shepherd,
    Expansion,
    OutcomeOnly,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::OmegaInit => "omega_init",
            Provenance::Saps => "saps",
            Provenance::Shepherd => "shepherd",
            Provenance::Expansion => "expansion",
            Provenance::OutcomeOnly => "outcome_only",
        }
    }
}

/// One labeled prefix `s_(0:j)` with `prefix_len = j + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStepRecord {
    pub question_id: String,
    pub prefix_len: usize,
    pub steps: Vec<String>,
    pub label: u8,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
}

fn default_provenance() -> Provenance {
    Provenance::Saps
}

impl LabeledStepRecord {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Schema(format!("labeled prefix for {} is empty", self.question_id)));
        }
        if self.prefix_len != self.steps.len() {
            return Err(Error::Schema(format!(
                "prefix_len {} does not match {} steps",
                self.prefix_len,
                self.steps.len()
            )));
        }
        if self.label > 1 {
            return Err(Error::Schema(format!("label {} is not 0 or 1", self.label)));
        }
        Ok(())
    }
}

/// Process-benchmark item: a trajectory with an annotated first error
/// (`-1` when every step is correct).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub question_id: String,
    pub prompt: String,
    pub gold_answer: String,
    pub steps: Vec<String>,
    pub first_error: i64,
}

impl BenchmarkRecord {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Schema(format!("benchmark record {} has no steps", self.question_id)));
        }
        let m = self.steps.len() as i64 - 1;
        if self.first_error < -1 || self.first_error > m {
            return Err(Error::Schema(format!(
                "benchmark record {}: first_error {} outside -1..={m}",
                self.question_id, self.first_error
            )));
        }
        Ok(())
    }

    pub fn annotated_first_error(&self) -> Option<usize> {
        usize::try_from(self.first_error).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub question_id: String,
    pub winner_steps: Vec<String>,
    pub loser_steps: Vec<String>,
    pub reward_w: f64,
    pub reward_l: f64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a JSONL file, keeping malformed lines as errors rather than failing
/// the whole read.
pub fn read_jsonl_lenient<T: DeserializeOwned>(path: &Path) -> Result<Vec<Result<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), lineno + 1))),
        );
    }
    Ok(out)
}
