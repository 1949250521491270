//! The self-improvement loop over the synthetic environment.
//!
//! Initialization fits a supervised policy `M_0` on gold demonstrations,
//! samples a first pool, labels a question subset by binary search and
//! trains the first verifier. Each iteration then samples new trajectories
//! with the previous policy, labels them with verifier-guided detection and
//! two-rollout verification, retrains the verifier on the accumulated
//! labels, scores the pool, builds preference pairs and re-aligns the
//! policy.
//!
//! Every iteration is persisted as `iter-NNN/` under the run root. It is
//! written into a staging directory first and promoted with one rename, so
//! an interrupted iteration never damages the last promoted one, and a
//! resumed run is byte-identical to an uninterrupted one.

mod state;
mod subset;

pub use state::{iteration_dir, latest_iteration, load_state, Manifest};
pub use subset::{nearest_to_centroids, question_features, select_subset};

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::baselines::omega_label;
use crate::config::{AlignBase, RunConfig};
use crate::error::{Error, Result};
use crate::evalkit::{emit_report, reasoner_verifier_gap, self_verification_error_rate, IterationMetrics};
use crate::keys::{canonical_key, derive_seed};
use crate::ledger::CostLedger;
use crate::prefs::{align_update, build_pref_pairs, trajectory_reward, AlignConfig, PreferencePair};
use crate::reasoner::{dedup_filter, sample_batch, Reasoner, SampleBatch, SyntheticReasoner};
use crate::records::{read_jsonl, write_jsonl, Provenance};
use crate::saps::{preassign, saps_label, RolloutSettings, VerificationCase};
use crate::synthenv::{greedy_pass_rate, PolicyParams, SynthEnv};
use crate::types::{LabelSequence, Question, Trajectory};
use crate::verifier::{train_mse, StepLabelDataset, StepScorer, TrainConfig, VerifierParams};

pub const CONFIG_FILE: &str = "config.toml";
pub const ENV_FILE: &str = "env.json";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const PROBE_FILE: &str = "probe.jsonl";
pub const REPORT_DIR: &str = "report";

/// Everything fixed for the lifetime of a run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: RunConfig,
    pub seed: u64,
    pub env: Arc<SynthEnv>,
    pub questions: Vec<Question>,
    /// Questions whose new samples are step-labeled.
    pub subset: Vec<Question>,
    pub demos: Vec<Trajectory>,
    /// Fixed trajectories on which the reasoner-verifier gap is measured.
    pub probe: Vec<Trajectory>,
    pub m0: PolicyParams,
    pub root: PathBuf,
}

/// State after iteration `t` (`t = 0` is initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub t: usize,
    pub policy: PolicyParams,
    pub verifier: VerifierParams,
    pub pool: Vec<Trajectory>,
    pub labels: StepLabelDataset,
    pub prefs: Vec<PreferencePair>,
    pub metrics: Vec<IterationMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: IterationState,
    pub report_files: Vec<PathBuf>,
}

/// Builds or loads the environment a config describes.
pub fn load_or_generate_env(cfg: &RunConfig) -> Result<SynthEnv> {
    match &cfg.env_path {
        Some(p) => SynthEnv::load(Path::new(p)),
        None => SynthEnv::generate(&cfg.env_params(derive_seed(cfg.require_seed()?, &["env"]))),
    }
}

/// Gold demonstrations for a seeded `fraction` of the questions (at least
/// one when the fraction is positive).
pub fn make_demos(env: &SynthEnv, fraction: f64, seed: u64) -> Result<Vec<Trajectory>> {
    let mut ids: Vec<(u64, &str)> =
        env.env_questions().iter().map(|q| (derive_seed(seed, &["demo", &q.id]), q.id.as_str())).collect();
    ids.sort();
    let n = ids.len();
    let take = if fraction <= 0.0 { 0 } else { ((fraction * n as f64).ceil() as usize).clamp(1, n) };
    let mut chosen: Vec<&str> = ids[..take].iter().map(|(_, id)| *id).collect();
    let order: BTreeMap<&str, usize> = env.env_questions().iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    chosen.sort_by_key(|id| order[id]);
    chosen.into_iter().map(|id| env.demo_trajectory(id, derive_seed(seed, &["demo-path", id]))).collect()
}

fn reasoner_for(ctx: &RunContext, policy: &PolicyParams) -> Result<SyntheticReasoner> {
    SyntheticReasoner::new(ctx.env.clone(), policy.clone(), ctx.cfg.per_step_flop)
}

fn keys_by_question(pool: &[Trajectory]) -> BTreeMap<&str, HashSet<String>> {
    let mut m: BTreeMap<&str, HashSet<String>> = BTreeMap::new();
    for t in pool {
        m.entry(t.question_id.as_str()).or_default().insert(canonical_key(t));
    }
    m
}

/// K fresh trajectories per question, skipping anything already pooled.
/// A question whose sampler gives up contributes what it collected.
fn sample_round(ctx: &RunContext, reasoner: &dyn Reasoner, pool: &[Trajectory], tag: &str) -> Result<(Vec<Trajectory>, CostLedger)> {
    let keys = keys_by_question(pool);
    let empty = HashSet::new();
    let cfg = &ctx.cfg;
    let batches: Vec<Result<SampleBatch>> = ctx
        .questions
        .par_iter()
        .map(|q| {
            let existing = keys.get(q.id.as_str()).unwrap_or(&empty);
            let seed = derive_seed(ctx.seed, &[tag, "sample", &q.id]);
            match sample_batch(reasoner, q, cfg.samples_per_question, cfg.temperature(), existing, cfg.retry_factor, seed) {
                Err(Error::Sampling { attempts, partial, source }) => {
                    tracing::warn!(question = %q.id, attempts, error = %source, "sampling stopped early");
                    Ok(SampleBatch { trajectories: partial, ledger: CostLedger::default(), attempts })
                }
                other => other,
            }
        })
        .collect();
    let mut out = Vec::new();
    let mut ledger = CostLedger::default();
    for b in batches {
        let b = b?;
        ledger += b.ledger;
        out.extend(b.trajectories);
    }
    Ok((out, ledger))
}

fn verifier_config(ctx: &RunContext, t: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: ctx.cfg.verifier_lr,
        epochs: ctx.cfg.verifier_epochs,
        batch_size: ctx.cfg.verifier_batch,
        seed: derive_seed(ctx.seed, &["verifier", &t.to_string()]),
    }
}

fn settings(ctx: &RunContext, parts: &[&str]) -> RolloutSettings {
    RolloutSettings { count: ctx.cfg.rollout_count, temperature: ctx.cfg.temperature(), seed: derive_seed(ctx.seed, parts) }
}

fn measure_gap(ctx: &RunContext, verifier: &VerifierParams, policy: &PolicyParams, t: usize) -> Result<(f64, CostLedger)> {
    let r = reasoner_for(ctx, policy)?;
    let g = reasoner_verifier_gap(
        verifier,
        &r,
        &ctx.questions,
        &ctx.probe,
        ctx.cfg.rollout_count,
        ctx.cfg.step_threshold,
        ctx.cfg.temperature(),
        derive_seed(ctx.seed, &["gap", &t.to_string()]),
    )?;
    Ok((g.gap, g.ledger))
}

fn in_subset(ctx: &RunContext) -> HashSet<&str> {
    ctx.subset.iter().map(|q| q.id.as_str()).collect()
}

fn question_map(ctx: &RunContext) -> BTreeMap<&str, &Question> {
    ctx.questions.iter().map(|q| (q.id.as_str(), q)).collect()
}

/// Writes the run inputs, fits `M_0`, samples and binary-search labels the
/// first pool, trains `V_0`, and promotes `iter-000`.
pub fn initialize(cfg: &RunConfig, env: Arc<SynthEnv>, demos: Vec<Trajectory>, root: &Path) -> Result<(RunContext, IterationState)> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    if env.env_questions().is_empty() {
        return Err(Error::Config("the environment has no questions".into()));
    }
    if demos.is_empty() {
        return Err(Error::Empty("demonstrations"));
    }
    for d in &demos {
        let q = env.question(&d.question_id)?;
        if d.final_answer != q.gold_answer {
            return Err(Error::InvalidArgument(format!("demonstration for {} misses the gold answer", q.id)));
        }
    }
    let started = Instant::now();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    if latest_iteration(root)?.is_some() {
        return Err(Error::Config(format!("{} already holds a run; resume it instead", root.display())));
    }
    let m0 = PolicyParams::uniform(&env).sft_update(&env, &demos, cfg.sft_lr, cfg.sft_epochs)?;
    let questions = env.questions();
    let subset = if cfg.subset_enabled() {
        select_subset(&questions, cfg.cluster_count, cfg.per_cluster, derive_seed(seed, &["subset"]))
    } else {
        questions.clone()
    };
    let uniform = SyntheticReasoner::new(env.clone(), PolicyParams::uniform(&env), cfg.per_step_flop)?;
    let mut probe = Vec::new();
    for q in &questions {
        let (ts, _) = uniform.sample(q, cfg.probe_per_question, 1.0, derive_seed(seed, &["probe", &q.id]))?;
        probe.extend(ts);
    }
    let ctx = RunContext { cfg: cfg.clone(), seed, env, questions, subset, demos, probe, m0, root: root.to_path_buf() };
    state::write_run_inputs(&ctx)?;

    let reasoner = reasoner_for(&ctx, &ctx.m0)?;
    let (samples, sample_ledger) = sample_round(&ctx, &reasoner, &ctx.demos, "init")?;
    let mut pool = ctx.demos.clone();
    pool.extend(samples.iter().cloned());

    let qmap = question_map(&ctx);
    let chosen = in_subset(&ctx);
    let targets: Vec<(usize, &Trajectory)> =
        pool.iter().enumerate().filter(|(_, t)| chosen.contains(t.question_id.as_str())).collect();
    let labeled: Vec<Result<(LabelSequence, CostLedger, bool)>> = targets
        .par_iter()
        .map(|(i, t)| {
            let q = qmap[t.question_id.as_str()];
            let r = omega_label(&reasoner, q, t, settings(&ctx, &["init", "omega", &i.to_string()]))?;
            Ok((r.labels, r.ledger, q.is_correct(&t.final_answer)))
        })
        .collect();
    let mut labels = StepLabelDataset::new();
    let mut label_ledger = CostLedger::default();
    let mut flagged = 0;
    for ((_, t), r) in targets.iter().zip(labeled) {
        let (ls, ledger, correct) = r?;
        let prov = if correct { Provenance::OutcomeOnly } else { Provenance::OmegaInit };
        flagged += usize::from(!correct);
        labels.push_trajectory(t, &ls, 0, prov)?;
        label_ledger += ledger;
    }
    if labels.is_empty() {
        return Err(Error::Empty("initial step labels"));
    }
    let v_init = VerifierParams::zeros(cfg.verifier_dim, cfg.verifier_hash_seed)?;
    let (verifier, trace) = train_mse(&v_init, &labels, &verifier_config(&ctx, 0))?;
    let (gap, gap_ledger) = measure_gap(&ctx, &verifier, &ctx.m0, 0)?;
    let metrics = IterationMetrics {
        iteration: 0,
        pass_rate: greedy_pass_rate(&ctx.env, &ctx.m0)?,
        gap,
        sve_rate: None,
        pool_size: pool.len(),
        new_samples: samples.len(),
        label_records: labels.len(),
        pref_pairs: 0,
        flagged,
        expansions: 0,
        case_a: 0,
        case_b: 0,
        case_c: 0,
        case_anomaly: 0,
        sample_rollouts: sample_ledger.rollouts,
        sample_steps: sample_ledger.generated_steps,
        label_batches: label_ledger.rollout_batches,
        label_rollouts: label_ledger.rollouts,
        label_steps: label_ledger.generated_steps,
        label_flops: label_ledger.flop_proxy,
        gap_batches: gap_ledger.rollout_batches,
        verifier_loss: trace.last().copied().unwrap_or(f64::NAN),
        align_loss: None,
        wall_seconds: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
    };
    let st = IterationState { t: 0, policy: ctx.m0.clone(), verifier, pool, labels, prefs: Vec::new(), metrics: vec![metrics] };
    state::promote(&ctx, &st)?;
    Ok((ctx, st))
}

/// Per-trajectory outcome of the labeling stage.
struct Labeled {
    dataset: StepLabelDataset,
    ledger: CostLedger,
    flagged: bool,
    case: Option<VerificationCase>,
    expansions: usize,
    preassigned: LabelSequence,
    oracle: LabelSequence,
    correct: bool,
}

fn label_new_sample(ctx: &RunContext, reasoner: &dyn Reasoner, verifier: &VerifierParams, q: &Question, t: &Trajectory, tag: &[&str]) -> Result<Labeled> {
    let correct = q.is_correct(&t.final_answer);
    let scores = verifier.score(&t.question_id, &t.steps)?;
    let preassigned = preassign(&scores, correct, ctx.cfg.step_threshold)?;
    let r = saps_label(reasoner, verifier, q, t, ctx.cfg.step_threshold, settings(ctx, tag))?;
    Ok(Labeled {
        dataset: r.to_dataset(t)?,
        ledger: r.ledger,
        flagged: !correct,
        case: r.verification.as_ref().map(|v| v.case),
        expansions: r.expansions.len(),
        preassigned,
        oracle: ctx.env.oracle_labels(t)?,
        correct,
    })
}

/// One pass of the loop from `prev` (iteration `t-1`) to iteration `t`.
/// Nothing is written; see [`step`] for the persisted version.
pub fn iterate_once(ctx: &RunContext, prev: &IterationState) -> Result<IterationState> {
    let started = Instant::now();
    let cfg = &ctx.cfg;
    let t = prev.t + 1;
    let ts = t.to_string();
    let reasoner = reasoner_for(ctx, &prev.policy)?;

    let (drawn, sample_ledger) = sample_round(ctx, &reasoner, &prev.pool, &format!("iter-{t}"))?;
    let fresh = dedup_filter(drawn, &prev.pool, cfg.dedup_similarity);

    let qmap = question_map(ctx);
    let chosen = in_subset(ctx);
    let targets: Vec<(usize, &Trajectory)> =
        fresh.iter().enumerate().filter(|(_, s)| chosen.contains(s.question_id.as_str())).collect();
    let results: Vec<Result<Labeled>> = targets
        .par_iter()
        .map(|(i, s)| {
            let q = qmap[s.question_id.as_str()];
            label_new_sample(ctx, &reasoner, &prev.verifier, q, s, &["iter", &ts, "saps", &i.to_string()])
        })
        .collect();

    let mut labels = prev.labels.clone();
    let mut label_ledger = CostLedger::default();
    let (mut flagged, mut expansions) = (0, 0);
    let mut cases = BTreeMap::new();
    let (mut pre, mut ora, mut outcome) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        let r = r?;
        labels.extend(&r.dataset)?;
        label_ledger += r.ledger;
        flagged += usize::from(r.flagged);
        expansions += r.expansions;
        if let Some(c) = r.case {
            *cases.entry(c).or_insert(0usize) += 1;
        }
        pre.push(r.preassigned);
        ora.push(r.oracle);
        outcome.push(r.correct);
    }
    let sve_rate = if pre.is_empty() { None } else { Some(self_verification_error_rate(&pre, &ora, &outcome)?) };

    let (verifier, vtrace) = train_mse(&prev.verifier, &labels, &verifier_config(ctx, t))?;

    let mut pool = prev.pool.clone();
    pool.extend(fresh.iter().cloned());
    let scored = pool
        .par_iter()
        .map(|p| Ok((p.clone(), trajectory_reward(&verifier.score(&p.question_id, &p.steps)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let prefs = build_pref_pairs(&scored, cfg.pref_threshold, cfg.max_pairs_per_question)?;

    let base = match cfg.align_base {
        AlignBase::M0 => &ctx.m0,
        AlignBase::Prev => &prev.policy,
    };
    let (policy, align_loss) = if prefs.is_empty() {
        tracing::warn!(iteration = t, "no preference pairs cleared the threshold; keeping the base policy");
        (base.clone(), None)
    } else {
        let acfg = AlignConfig {
            beta: cfg.orpo_beta,
            learning_rate: cfg.align_lr,
            epochs: cfg.align_epochs,
            batch_size: cfg.align_batch,
            temperature: 1.0,
            seed: derive_seed(ctx.seed, &["align", &ts]),
        };
        let (p, trace) = align_update(base, &ctx.env, &prefs, &acfg)?;
        (p, trace.last().copied())
    };

    let (gap, gap_ledger) = measure_gap(ctx, &verifier, &policy, t)?;
    let count = |c: VerificationCase| cases.get(&c).copied().unwrap_or(0);
    let row = IterationMetrics {
        iteration: t,
        pass_rate: greedy_pass_rate(&ctx.env, &policy)?,
        gap,
        sve_rate,
        pool_size: pool.len(),
        new_samples: fresh.len(),
        label_records: labels.len(),
        pref_pairs: prefs.len(),
        flagged,
        expansions,
        case_a: count(VerificationCase::AExact),
        case_b: count(VerificationCase::BLateFlag),
        case_c: count(VerificationCase::CEarlyFlag),
        case_anomaly: count(VerificationCase::Anomaly),
        sample_rollouts: sample_ledger.rollouts,
        sample_steps: sample_ledger.generated_steps,
        label_batches: label_ledger.rollout_batches,
        label_rollouts: label_ledger.rollouts,
        label_steps: label_ledger.generated_steps,
        label_flops: label_ledger.flop_proxy,
        gap_batches: gap_ledger.rollout_batches,
        verifier_loss: vtrace.last().copied().unwrap_or(f64::NAN),
        align_loss,
        wall_seconds: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
    };
    let mut metrics = prev.metrics.clone();
    metrics.push(row);
    Ok(IterationState { t, policy, verifier, pool, labels, prefs, metrics })
}

/// [`iterate_once`] followed by atomic promotion of the new state.
pub fn step(ctx: &RunContext, prev: &IterationState) -> Result<IterationState> {
    let next = iterate_once(ctx, prev)?;
    state::promote(ctx, &next)?;
    Ok(next)
}

/// Reloads a run rooted at `root` and its latest promoted state.
pub fn open_run(root: &Path) -> Result<(RunContext, IterationState)> {
    let cfg = RunConfig::load(&root.join(CONFIG_FILE))?;
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let env = Arc::new(SynthEnv::load(&root.join(ENV_FILE))?);
    let demos: Vec<Trajectory> = read_jsonl(&root.join(DEMOS_FILE))?;
    let probe: Vec<Trajectory> = read_jsonl(&root.join(PROBE_FILE))?;
    let questions = env.questions();
    let subset = if cfg.subset_enabled() {
        select_subset(&questions, cfg.cluster_count, cfg.per_cluster, derive_seed(seed, &["subset"]))
    } else {
        questions.clone()
    };
    let m0 = PolicyParams::load(&iteration_dir(root, 0).join(state::POLICY_FILE))?;
    m0.check_compatible(&env)?;
    let ctx = RunContext { cfg, seed, env, questions, subset, demos, probe, m0, root: root.to_path_buf() };
    state::clear_staging(root)?;
    let t = latest_iteration(root)?.ok_or_else(|| Error::Config(format!("{} holds no promoted iteration", root.display())))?;
    let st = load_state(&ctx, t)?;
    Ok((ctx, st))
}

/// Runs until iteration `iters`, resuming from the latest promoted state if
/// `root` already holds a run. Emits the metrics report under `report/`.
pub fn run(cfg: &RunConfig, root: &Path, iters: usize) -> Result<RunOutcome> {
    if iters == 0 {
        return Err(Error::Config("the number of iterations must be >= 1".into()));
    }
    let has_run = root.join(CONFIG_FILE).exists() && latest_iteration(root)?.is_some();
    let (ctx, mut st) = if has_run {
        open_run(root)?
    } else {
        cfg.validate()?;
        let seed = cfg.require_seed()?;
        let env = Arc::new(load_or_generate_env(cfg)?);
        let demos = make_demos(&env, cfg.demo_fraction, seed)?;
        initialize(cfg, env, demos, root)?
    };
    while st.t < iters {
        st = step(&ctx, &st)?;
        tracing::info!(iteration = st.t, pass_rate = st.metrics[st.t].pass_rate, gap = st.metrics[st.t].gap, "iteration done");
    }
    let report_files = emit_report(&st.metrics, &root.join(REPORT_DIR))?;
    Ok(RunOutcome { state: st, report_files })
}

/// Writes `pool`, `labels` and `prefs` of a state as plain JSONL into `dir`.
pub fn export_state(st: &IterationState, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [dir.join("pool.jsonl"), dir.join("labels.jsonl"), dir.join("prefs.jsonl")];
    write_jsonl(&files[0], &st.pool)?;
    write_jsonl(&files[1], st.labels.records())?;
    write_jsonl(&files[2], &st.prefs)?;
    Ok(files.to_vec())
}
