use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{IterationState, RunContext, CONFIG_FILE, DEMOS_FILE, ENV_FILE, PROBE_FILE};
use crate::error::{Error, Result};
use crate::evalkit::{read_metrics_csv, write_metrics_csv};
use crate::records::{read_jsonl, write_jsonl};
use crate::synthenv::PolicyParams;
use crate::verifier::{StepLabelDataset, VerifierParams};

pub(super) const POLICY_FILE: &str = "policy.ckpt";
pub(super) const VERIFIER_FILE: &str = "verifier.ckpt";
const POOL_FILE: &str = "pool.jsonl";
const LABELS_FILE: &str = "labels.jsonl";
const PREFS_FILE: &str = "prefs.jsonl";
const METRICS_FILE: &str = "metrics.csv";
const MANIFEST_FILE: &str = "manifest.json";
const STAGING_PREFIX: &str = ".staging-";

const STATE_FILES: [&str; 6] = [POLICY_FILE, VERIFIER_FILE, POOL_FILE, LABELS_FILE, PREFS_FILE, METRICS_FILE];
const INPUT_FILES: [&str; 4] = [CONFIG_FILE, ENV_FILE, DEMOS_FILE, PROBE_FILE];

/// Content hashes of one iteration's files and of the run inputs it was
/// derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub iteration: usize,
    pub inputs: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

pub fn iteration_dir(root: &Path, t: usize) -> PathBuf {
    root.join(format!("iter-{t:03}"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.to_string(), sha256_file(&dir.join(n))?))).collect()
}

/// Highest promoted iteration under `root`, if any.
pub fn latest_iteration(root: &Path) -> Result<Option<usize>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(t) = name.to_str().and_then(|n| n.strip_prefix("iter-")).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().join(MANIFEST_FILE).is_file() {
            best = best.max(Some(t));
        }
    }
    Ok(best)
}

/// Removes leftovers of iterations that never got promoted.
pub(super) fn clear_staging(root: &Path) -> Result<()> {
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_name().to_string_lossy().starts_with(STAGING_PREFIX) {
            fs::remove_dir_all(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

pub(super) fn write_run_inputs(ctx: &RunContext) -> Result<()> {
    let root = &ctx.root;
    let cfg_path = root.join(CONFIG_FILE);
    fs::write(&cfg_path, ctx.cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    ctx.env.save(&root.join(ENV_FILE))?;
    write_jsonl(&root.join(DEMOS_FILE), &ctx.demos)?;
    write_jsonl(&root.join(PROBE_FILE), &ctx.probe)?;
    Ok(())
}

/// Writes the state into a staging directory, then renames it into place.
pub(super) fn promote(ctx: &RunContext, st: &IterationState) -> Result<PathBuf> {
    let root = &ctx.root;
    let final_dir = iteration_dir(root, st.t);
    if final_dir.exists() {
        return Err(Error::Config(format!("{} already exists", final_dir.display())));
    }
    let staging = root.join(format!("{STAGING_PREFIX}iter-{:03}", st.t));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    st.policy.save(&staging.join(POLICY_FILE))?;
    st.verifier.save(&staging.join(VERIFIER_FILE))?;
    write_jsonl(&staging.join(POOL_FILE), &st.pool)?;
    write_jsonl(&staging.join(LABELS_FILE), st.labels.records())?;
    write_jsonl(&staging.join(PREFS_FILE), &st.prefs)?;
    write_metrics_csv(&staging.join(METRICS_FILE), &st.metrics)?;
    let manifest = Manifest { iteration: st.t, inputs: hashes(root, &INPUT_FILES)?, files: hashes(&staging, &STATE_FILES)? };
    let mpath = staging.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;
    fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(final_dir)
}

/// Loads iteration `t` after checking every file against its manifest.
pub fn load_state(ctx: &RunContext, t: usize) -> Result<IterationState> {
    let dir = iteration_dir(&ctx.root, t);
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let corrupt = |what: String| Error::Checkpoint { path: dir.clone(), reason: what };
    if manifest.iteration != t {
        return Err(corrupt(format!("manifest is for iteration {}", manifest.iteration)));
    }
    if manifest.files != hashes(&dir, &STATE_FILES)? {
        return Err(corrupt("state files do not match the manifest".into()));
    }
    if manifest.inputs != hashes(&ctx.root, &INPUT_FILES)? {
        return Err(corrupt("run inputs changed since this iteration was written".into()));
    }
    let policy = PolicyParams::load(&dir.join(POLICY_FILE))?;
    policy.check_compatible(&ctx.env)?;
    let verifier =
        VerifierParams::load_expecting(&dir.join(VERIFIER_FILE), ctx.cfg.verifier_dim, ctx.cfg.verifier_hash_seed)?;
    let metrics = read_metrics_csv(&dir.join(METRICS_FILE))?;
    if metrics.len() != t + 1 {
        return Err(corrupt(format!("{} metrics rows for iteration {t}", metrics.len())));
    }
    Ok(IterationState {
        t,
        policy,
        verifier,
        pool: read_jsonl(&dir.join(POOL_FILE))?,
        labels: StepLabelDataset::from_records(read_jsonl(&dir.join(LABELS_FILE))?)?,
        prefs: read_jsonl(&dir.join(PREFS_FILE))?,
        metrics,
    })
}
