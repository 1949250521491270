//! Process verifier: a hashed linear model over step prefixes with a sigmoid
//! head, trained with mean squared error against 0/1 step labels.
//!
//! Features of prefix `s_(0:j)` for question `q`:
//! one chained feature per ancestor prefix `q, s_0..s_i` (`i <= j`), the
//! current step by position (with and without `q`), the last bigram, the
//! position, and `q` itself. The chained features let an unseen prefix
//! inherit what was learned about its ancestors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::keys::canonical_steps_key;
use crate::records::{read_jsonl, write_jsonl, LabeledStepRecord, Provenance};
use crate::types::{LabelSequence, ScoreSequence, Trajectory};

pub const VERIFIER_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 1 << 16;

/// Keeps emitted scores strictly inside (0, 1) when the logit saturates.
const SCORE_EPS: f64 = 1e-15;

/// Anything that assigns a score in `[0, 1]` to every prefix of a step
/// sequence.
pub trait StepScorer: Sync {
    fn score(&self, question_id: &str, steps: &[String]) -> Result<ScoreSequence>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierParams {
    dim: usize,
    hash_seed: u64,
    weights: Vec<f64>,
    bias: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl VerifierParams {
    /// Zero weights and bias: every score is 0.5.
    pub fn zeros(dim: usize, hash_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("verifier dimension must be >= 1".into()));
        }
        Ok(VerifierParams { dim, hash_seed, weights: vec![0.0; dim], bias: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, b: f64) {
        self.bias = b;
    }

    /// Feature indices of every prefix of `steps`; entry `j` holds the
    /// active (possibly repeated) indices for `s_(0:j)`.
    pub fn prefix_features<S: AsRef<str>>(&self, question_id: &str, steps: &[S]) -> Vec<Vec<u32>> {
        self.features_from(question_id, steps, 0)
    }

    /// Features of the full prefix only.
    pub fn last_prefix_features<S: AsRef<str>>(&self, question_id: &str, steps: &[S]) -> Vec<u32> {
        self.features_from(question_id, steps, steps.len().saturating_sub(1)).pop().unwrap_or_default()
    }

    fn features_from<S: AsRef<str>>(&self, question_id: &str, steps: &[S], first: usize) -> Vec<Vec<u32>> {
        let mut base = Sha256::new();
        base.update(self.hash_seed.to_le_bytes());
        let index = |h: Sha256| -> u32 {
            let d = h.finalize();
            (u64::from_le_bytes(d[..8].try_into().expect("32-byte digest")) % self.dim as u64) as u32
        };
        let tagged = |tag: &str, parts: &[&str]| -> u32 {
            let mut h = base.clone();
            h.update(tag.as_bytes());
            for p in parts {
                h.update([0x1f]);
                h.update(p.as_bytes());
            }
            index(h)
        };

        let mut chain = base.clone();
        chain.update(b"chain");
        chain.update([0x1f]);
        chain.update(question_id.as_bytes());
        let q_feat = tagged("q", &[question_id]);

        let mut out: Vec<Vec<u32>> = Vec::with_capacity(steps.len() - first.min(steps.len()));
        let mut ancestors: Vec<u32> = Vec::with_capacity(steps.len());
        for (j, s) in steps.iter().enumerate() {
            let s = s.as_ref().trim();
            chain.update([0x1e]);
            chain.update(s.as_bytes());
            ancestors.push(index(chain.clone()));
            if j < first {
                continue;
            }
            let pos = j.to_string();
            let prev = if j == 0 { "^" } else { steps[j - 1].as_ref().trim() };
            let mut f = ancestors.clone();
            f.push(q_feat);
            f.push(tagged("qps", &[question_id, &pos, s]));
            f.push(tagged("ps", &[&pos, s]));
            f.push(tagged("bi", &[prev, s]));
            f.push(tagged("pos", &[&pos]));
            out.push(f);
        }
        out
    }

    fn logit(&self, features: &[u32]) -> f64 {
        self.bias + features.iter().map(|&i| self.weights[i as usize]).sum::<f64>()
    }

    fn score_features(&self, features: &[u32]) -> f64 {
        sigmoid(self.logit(features)).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("verifier weights are not finite".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: VERIFIER_FORMAT_VERSION,
            dim: self.dim,
            hash_seed: self.hash_seed,
            bias: self.bias,
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ckpt.version != VERIFIER_FORMAT_VERSION {
            return Err(bad(format!("unsupported verifier format version {}", ckpt.version)));
        }
        if ckpt.dim == 0 {
            return Err(bad("dimension is zero".into()));
        }
        let mut weights = vec![0.0; ckpt.dim];
        for (i, w) in ckpt.weights {
            let slot = weights.get_mut(i as usize).ok_or_else(|| bad(format!("weight index {i} >= dim {}", ckpt.dim)))?;
            *slot = w;
        }
        let p = VerifierParams { dim: ckpt.dim, hash_seed: ckpt.hash_seed, weights, bias: ckpt.bias };
        p.check_finite().map_err(|e| bad(e.to_string()))?;
        Ok(p)
    }

    /// Loads and checks the checkpoint was built with the expected feature
    /// dimension and hash seed.
    pub fn load_expecting(path: &Path, dim: usize, hash_seed: u64) -> Result<Self> {
        let p = Self::load(path)?;
        if p.dim != dim || p.hash_seed != hash_seed {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "built for dim {} / hash seed {}, expected dim {dim} / hash seed {hash_seed}",
                    p.dim, p.hash_seed
                ),
            });
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    dim: usize,
    hash_seed: u64,
    bias: f64,
    /// Sparse `(index, weight)` pairs; absent indices are zero.
    weights: Vec<(u32, f64)>,
}

impl StepScorer for VerifierParams {
    fn score(&self, question_id: &str, steps: &[String]) -> Result<ScoreSequence> {
        if steps.is_empty() {
            return Err(Error::Empty("steps to score"));
        }
        let scores = self.prefix_features(question_id, steps).iter().map(|f| self.score_features(f)).collect();
        ScoreSequence::new(scores)
    }
}

/// One score per step plus the labels at `threshold` (1 iff score >= it).
pub fn score_steps(scorer: &dyn StepScorer, trajectory: &Trajectory, threshold: f64) -> Result<(ScoreSequence, Vec<u8>)> {
    let scores = scorer.score(&trajectory.question_id, &trajectory.steps)?;
    let labels = scores.thresholded(threshold);
    Ok((scores, labels))
}

/// Labeled prefixes, deduplicated on (question, prefix, label). Conflicting
/// labels for the same prefix are both kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLabelDataset {
    records: Vec<LabeledStepRecord>,
    seen: HashSet<(String, String, u8)>,
}

impl StepLabelDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<LabeledStepRecord>) -> Result<Self> {
        let mut d = Self::new();
        for r in records {
            d.push(r)?;
        }
        Ok(d)
    }

    /// Adds a record; returns false if an identical one is already present.
    pub fn push(&mut self, record: LabeledStepRecord) -> Result<bool> {
        record.validate()?;
        let key = (record.question_id.clone(), canonical_steps_key(&record.steps), record.label);
        if !self.seen.insert(key) {
            return Ok(false);
        }
        self.records.push(record);
        Ok(true)
    }

    /// Adds records for the labeled positions `from..=m` of a trajectory.
    pub fn push_trajectory(
        &mut self,
        trajectory: &Trajectory,
        labels: &LabelSequence,
        from: usize,
        provenance: Provenance,
    ) -> Result<usize> {
        if labels.len() != trajectory.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a {}-step trajectory",
                labels.len(),
                trajectory.len()
            )));
        }
        let mut added = 0;
        for j in from..trajectory.len() {
            let r = LabeledStepRecord {
                question_id: trajectory.question_id.clone(),
                prefix_len: j + 1,
                steps: trajectory.prefix(j).to_vec(),
                label: labels.labels()[j],
                provenance,
            };
            added += usize::from(self.push(r)?);
        }
        Ok(added)
    }

    pub fn extend(&mut self, other: &StepLabelDataset) -> Result<usize> {
        let mut added = 0;
        for r in &other.records {
            added += usize::from(self.push(r.clone())?);
        }
        Ok(added)
    }

    pub fn records(&self) -> &[LabeledStepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn export_step_dataset(dataset: &StepLabelDataset, path: &Path) -> Result<usize> {
    write_jsonl(path, dataset.records())
}

pub fn import_step_dataset(path: &Path) -> Result<StepLabelDataset> {
    StepLabelDataset::from_records(read_jsonl(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Featurized training set, computed once per training call.
struct Featurized {
    features: Vec<Vec<u32>>,
    labels: Vec<f64>,
}

impl Featurized {
    fn new(params: &VerifierParams, dataset: &StepLabelDataset) -> Self {
        let mut features = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        for r in dataset.records() {
            features.push(params.last_prefix_features(&r.question_id, &r.steps));
            labels.push(f64::from(r.label));
        }
        Featurized { features, labels }
    }

    fn loss(&self, params: &VerifierParams) -> f64 {
        let total: f64 = self
            .features
            .iter()
            .zip(&self.labels)
            .map(|(f, c)| {
                let d = sigmoid(params.logit(f)) - c;
                d * d
            })
            .sum();
        total / self.features.len() as f64
    }
}

/// Mean of `(f - c)^2` over the dataset. The unclamped sigmoid is used so the
/// value is differentiable everywhere.
pub fn mse_loss(params: &VerifierParams, dataset: &StepLabelDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("step-label dataset"));
    }
    Ok(Featurized::new(params, dataset).loss(params))
}

/// Analytic gradient of [`mse_loss`]: `(d/dw, d/db)`.
pub fn mse_grad(params: &VerifierParams, dataset: &StepLabelDataset) -> Result<(Vec<f64>, f64)> {
    if dataset.is_empty() {
        return Err(Error::Empty("step-label dataset"));
    }
    let data = Featurized::new(params, dataset);
    let mut gw = vec![0.0; params.dim];
    let mut gb = 0.0;
    let n = data.features.len() as f64;
    for (f, c) in data.features.iter().zip(&data.labels) {
        let s = sigmoid(params.logit(f));
        let g = 2.0 * (s - c) * s * (1.0 - s) / n;
        gb += g;
        for &i in f {
            gw[i as usize] += g;
        }
    }
    Ok((gw, gb))
}

/// Mini-batch gradient descent on the MSE, starting from `init` (warm
/// start). Batch order comes from `seed` alone, so identical inputs give
/// bitwise-identical weights. Returns the full-data loss after each epoch.
pub fn train_mse(init: &VerifierParams, dataset: &StepLabelDataset, cfg: &TrainConfig) -> Result<(VerifierParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("step-label dataset"));
    }
    if cfg.learning_rate.is_nan() || cfg.learning_rate < 0.0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("learning rate must be >= 0 and batch size >= 1".into()));
    }
    let data = Featurized::new(init, dataset);
    let mut p = init.clone();
    let mut order: Vec<usize> = (0..data.features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut touched: Vec<(u32, f64)> = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = cfg.learning_rate / batch.len() as f64;
            let mut gb = 0.0;
            touched.clear();
            for &k in batch {
                let f = &data.features[k];
                let s = sigmoid(p.logit(f));
                let g = 2.0 * (s - data.labels[k]) * s * (1.0 - s);
                gb += g;
                touched.extend(f.iter().map(|&i| (i, g)));
            }
            for &(i, g) in &touched {
                p.weights[i as usize] -= scale * g;
            }
            p.bias -= scale * gb;
        }
        trace.push(data.loss(&p));
    }
    p.check_finite()?;
    Ok((p, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, steps: &[&str], label: u8) -> LabeledStepRecord {
        LabeledStepRecord {
            question_id: q.into(),
            prefix_len: steps.len(),
            steps: steps.iter().map(|s| s.to_string()).collect(),
            label,
            provenance: Provenance::Saps,
        }
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_params_score_one_half() {
        let v = VerifierParams::zeros(1024, 3).unwrap();
        let s = v.score("q", &strings(&["a", "b", "c"])).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5, 0.5]);
        assert!(VerifierParams::zeros(0, 0).is_err());
    }

    #[test]
    fn features_depend_on_hash_seed_and_prefix() {
        let a = VerifierParams::zeros(1 << 16, 1).unwrap();
        let b = VerifierParams::zeros(1 << 16, 2).unwrap();
        let steps = strings(&["x", "y"]);
        assert_ne!(a.prefix_features("q", &steps), b.prefix_features("q", &steps));
        let f = a.prefix_features("q", &steps);
        // chained features of the first prefix are shared by the second
        assert_eq!(f[0][0], f[1][0]);
        assert_eq!(f[1].len(), f[0].len() + 1);
        assert_eq!(a.last_prefix_features("q", &steps), f[1]);
    }

    #[test]
    fn balanced_untrained_loss_is_a_quarter() {
        let d = StepLabelDataset::from_records(vec![rec("q", &["a"], 1), rec("q", &["b"], 0)]).unwrap();
        let v = VerifierParams::zeros(256, 0).unwrap();
        assert!((mse_loss(&v, &d).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_record_is_fit() {
        let d = StepLabelDataset::from_records(vec![rec("q", &["a", "b"], 1)]).unwrap();
        let v = VerifierParams::zeros(256, 0).unwrap();
        let cfg = TrainConfig { learning_rate: 5.0, epochs: 400, batch_size: 1, seed: 0 };
        let (p, trace) = train_mse(&v, &d, &cfg).unwrap();
        assert!(p.score("q", &strings(&["a", "b"])).unwrap().as_slice()[1] >= 0.99);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let v = VerifierParams::zeros(16, 0).unwrap();
        let cfg = TrainConfig { learning_rate: 1.0, epochs: 1, batch_size: 1, seed: 0 };
        assert!(matches!(train_mse(&v, &StepLabelDataset::new(), &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let d = StepLabelDataset::from_records(vec![
            rec("q", &["a"], 1),
            rec("q", &["a", "b"], 0),
            rec("r", &["c"], 1),
            rec("r", &["c", "d"], 1),
        ])
        .unwrap();
        let v = VerifierParams::zeros(512, 9).unwrap();
        let cfg = TrainConfig { learning_rate: 1.0, epochs: 20, batch_size: 2, seed: 4 };
        let (a, ta) = train_mse(&v, &d, &cfg).unwrap();
        let (b, tb) = train_mse(&v, &d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn dataset_deduplicates_identical_records() {
        let mut d = StepLabelDataset::new();
        assert!(d.push(rec("q", &["a"], 1)).unwrap());
        assert!(!d.push(rec("q", &[" a "], 1)).unwrap());
        assert!(d.push(rec("q", &["a"], 0)).unwrap());
        assert!(d.push(rec("q", &[], 0)).is_err());
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let mut v = VerifierParams::zeros(128, 5).unwrap();
        v.weights_mut()[3] = 0.1 + 0.2;
        v.weights_mut()[100] = -1e-300;
        v.set_bias(-0.7);
        v.save(&path).unwrap();
        assert_eq!(VerifierParams::load(&path).unwrap(), v);
        assert!(VerifierParams::load_expecting(&path, 128, 5).is_ok());
        assert!(VerifierParams::load_expecting(&path, 256, 5).is_err());
        assert!(VerifierParams::load_expecting(&path, 128, 6).is_err());
        std::fs::write(&path, r#"{"version":1,"dim":4,"hash_seed":0,"bias":0.0,"weights":[[9,1.0]]}"#).unwrap();
        assert!(VerifierParams::load(&path).is_err());
    }
}
