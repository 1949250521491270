use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sapo_core::baselines::{compare_costs, label_with, CostInputs, LabelMethod};
use sapo_core::config::RunConfig;
use sapo_core::engine::{export_state, load_state, open_run, run, CONFIG_FILE};
use sapo_core::evalkit::{
    bon_accuracy, pass_at_1, reasoner_verifier_gap, self_verification_error_rate, step_accuracy,
};
use sapo_core::keys::{canonical_key, derive_seed};
use sapo_core::prefs::{align_update, build_pref_pairs, trajectory_reward, AlignConfig, PreferencePair};
use sapo_core::records::{read_jsonl, write_jsonl, BenchmarkRecord, Provenance};
use sapo_core::reasoner::sample_batch;
use sapo_core::saps::{preassign, saps_label, RolloutSettings};
use sapo_core::synthenv::{greedy_pass_rate, to_question, EnvParams, PolicyParams, SynthEnv};
use sapo_core::verifier::{
    export_step_dataset, import_step_dataset, train_mse, StepLabelDataset, StepScorer, TrainConfig, VerifierParams,
};
use sapo_core::{CostLedger, Error, Question, Result, Trajectory};
use serde_json::{json, Value};

use crate::{
    AlignArgs, BenchCostArgs, BuildPrefsArgs, Command, EvalCommand, ExportArgs, GenArgs, LabelArgs, RunArgs, SampleArgs,
    SynthenvCommand, TrainVerifierArgs, VerifierArgs,
};

pub fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Synthenv { command: SynthenvCommand::Gen(a) } => synthenv_gen(a),
        Command::Sample(a) => sample(a),
        Command::Label(a) => label(a),
        Command::TrainVerifier(a) => train_verifier(a),
        Command::BuildPrefs(a) => build_prefs(a),
        Command::Align(a) => align(a),
        Command::Run(a) => run_loop(a),
        Command::Eval { command } => eval(command),
        Command::BenchCost(a) => bench_cost(a),
        Command::Export(a) => export(a),
    }
}

fn ok(fields: Value) -> Value {
    let mut v = json!({ "status": "ok" });
    if let (Some(m), Value::Object(f)) = (v.as_object_mut(), fields) {
        m.extend(f);
    }
    v
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn load_verifier(a: &VerifierArgs) -> Result<VerifierParams> {
    match &a.verifier {
        Some(p) => VerifierParams::load(p),
        None => VerifierParams::zeros(a.dim, a.hash_seed),
    }
}

fn by_id(questions: &[Question]) -> BTreeMap<&str, &Question> {
    questions.iter().map(|q| (q.id.as_str(), q)).collect()
}

fn synthenv_gen(a: GenArgs) -> Result<Value> {
    let params = EnvParams {
        depth: a.depth,
        branching: a.branching,
        questions: a.questions,
        width: a.width,
        difficulty: a.difficulty,
        seed: a.seed,
        ..EnvParams::default()
    };
    let env = SynthEnv::generate(&params)?;
    env.save(&a.out)?;
    if let Some(q) = &a.questions_out {
        let qs: Vec<Question> = env.env_questions().iter().map(to_question).collect();
        write_jsonl(q, &qs)?;
    }
    Ok(ok(json!({ "out": a.out, "questions": env.env_questions().len(), "states": env.num_states() })))
}

fn sample(a: SampleArgs) -> Result<Value> {
    let src = a.source.open()?;
    let existing: HashSet<String> = match &a.exclude {
        Some(p) => read_jsonl::<Trajectory>(p)?.iter().map(canonical_key).collect(),
        None => HashSet::new(),
    };
    let batches = src
        .questions
        .par_iter()
        .map(|q| sample_batch(&*src.reasoner, q, a.samples, a.temperature, &existing, a.retry_factor, a.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut ledger = CostLedger::default();
    let mut out = Vec::new();
    let mut attempts = 0;
    for b in batches {
        ledger += b.ledger;
        attempts += b.attempts;
        out.extend(b.trajectories);
    }
    write_jsonl(&a.out, &out)?;
    Ok(ok(json!({ "out": a.out, "trajectories": out.len(), "attempts": attempts, "cost": ledger })))
}

fn label(a: LabelArgs) -> Result<Value> {
    let src = a.source.open()?;
    let verifier = load_verifier(&a.verifier)?;
    let trajectories: Vec<Trajectory> = read_jsonl(&a.input)?;
    let questions = by_id(&src.questions);
    let prov = match a.method {
        LabelMethod::Saps => Provenance::Saps,
        LabelMethod::Shepherd => Provenance::Shepherd,
        LabelMethod::Omega => Provenance::OmegaInit,
    };
    let results: Vec<Result<(StepLabelDataset, CostLedger, bool)>> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let q = questions.get(t.question_id.as_str()).ok_or_else(|| Error::UnknownQuestion(t.question_id.clone()))?;
            let settings = RolloutSettings {
                count: a.rollout.rollouts,
                temperature: a.rollout.temperature,
                seed: derive_seed(a.seed, &["label", &i.to_string()]),
            };
            if a.method == LabelMethod::Saps {
                let r = saps_label(&*src.reasoner, &verifier, q, t, a.rollout.threshold, settings)?;
                return Ok((r.to_dataset(t)?, r.ledger, false));
            }
            let r = label_with(a.method, &*src.reasoner, &verifier, q, t, a.rollout.threshold, settings)?;
            let mut d = StepLabelDataset::new();
            d.push_trajectory(t, &r.labels, 0, prov)?;
            Ok((d, r.ledger, r.flagged))
        })
        .collect();
    let mut data = StepLabelDataset::new();
    let mut ledger = CostLedger::default();
    let (mut failures, mut flagged) = (0usize, 0usize);
    for (t, r) in trajectories.iter().zip(results) {
        match r {
            Ok((d, l, f)) => {
                data.extend(&d)?;
                ledger += l;
                flagged += usize::from(f);
            }
            Err(e) if e.is_config() => return Err(e),
            Err(e) => {
                tracing::warn!(question = %t.question_id, error = %e, "labeling failed");
                failures += 1;
            }
        }
    }
    if failures == trajectories.len() && failures > 0 {
        return Err(Error::Empty("labels: every trajectory failed"));
    }
    export_step_dataset(&data, &a.out)?;
    Ok(ok(json!({
        "out": a.out,
        "method": a.method.as_str(),
        "trajectories": trajectories.len(),
        "records": data.len(),
        "failures": failures,
        "flagged": flagged,
        "cost": ledger,
    })))
}

fn train_verifier(a: TrainVerifierArgs) -> Result<Value> {
    let mut data = StepLabelDataset::new();
    for p in &a.labels {
        data.extend(&import_step_dataset(p)?)?;
    }
    let init = match &a.init {
        Some(p) => VerifierParams::load(p)?,
        None => VerifierParams::zeros(a.dim, a.hash_seed)?,
    };
    let cfg = TrainConfig { learning_rate: a.lr, epochs: a.epochs, batch_size: a.batch, seed: a.seed };
    let (v, trace) = train_mse(&init, &data, &cfg)?;
    v.save(&a.out)?;
    if let Some(t) = &a.trace {
        write_trace(t, &trace)?;
    }
    Ok(ok(json!({ "out": a.out, "records": data.len(), "final_loss": trace.last() })))
}

fn score_pool(v: &VerifierParams, pool: &[Trajectory]) -> Result<Vec<(Trajectory, f64)>> {
    pool.par_iter()
        .map(|t| Ok((t.clone(), trajectory_reward(&v.score(&t.question_id, &t.steps)?)?)))
        .collect()
}

fn build_prefs(a: BuildPrefsArgs) -> Result<Value> {
    let v = VerifierParams::load(&a.verifier)?;
    let pool: Vec<Trajectory> = read_jsonl(&a.pool)?;
    let pairs = build_pref_pairs(&score_pool(&v, &pool)?, a.eta, a.max_pairs)?;
    write_jsonl(&a.out, &pairs)?;
    Ok(ok(json!({ "out": a.out, "trajectories": pool.len(), "pairs": pairs.len() })))
}

fn align(a: AlignArgs) -> Result<Value> {
    let env = SynthEnv::load(&a.env)?;
    let policy = match &a.policy {
        Some(p) => PolicyParams::load(p)?,
        None => PolicyParams::uniform(&env),
    };
    let pairs: Vec<PreferencePair> = read_jsonl(&a.prefs)?;
    let cfg = AlignConfig {
        beta: a.beta,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        temperature: a.temperature,
        seed: a.seed,
    };
    let (aligned, trace) = align_update(&policy, &env, &pairs, &cfg)?;
    aligned.save(&a.out)?;
    if let Some(t) = &a.trace {
        write_trace(t, &trace)?;
    }
    Ok(ok(json!({
        "out": a.out,
        "pairs": pairs.len(),
        "final_loss": trace.last(),
        "greedy_pass_before": greedy_pass_rate(&env, &policy)?,
        "greedy_pass_after": greedy_pass_rate(&env, &aligned)?,
    })))
}

fn run_loop(a: RunArgs) -> Result<Value> {
    let (root, cfg) = match &a.resume {
        Some(dir) => {
            if !dir.join(CONFIG_FILE).is_file() {
                return Err(Error::Config(format!("{} does not hold a run", dir.display())));
            }
            (dir.clone(), RunConfig::load(&dir.join(CONFIG_FILE))?)
        }
        None => {
            let Some(out) = &a.out else {
                return Err(Error::Config("pass --out DIR for a new run or --resume DIR".into()));
            };
            if out.join(CONFIG_FILE).exists() {
                return Err(Error::Config(format!("{} already holds a run; use --resume", out.display())));
            }
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for kv in &a.set {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = a.seed {
                cfg.seed = Some(s);
            }
            (out.clone(), cfg)
        }
    };
    let iters = a.iters.unwrap_or(cfg.iterations);
    let outcome = run(&cfg, &root, iters)?;
    let last = outcome.state.metrics.last();
    Ok(ok(json!({
        "run": root,
        "iteration": outcome.state.t,
        "pass_rate": last.map(|m| m.pass_rate),
        "gap": last.map(|m| m.gap),
        "report": outcome.report_files,
    })))
}

fn gold_answers(env: Option<&PathBuf>, questions: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    let qs: Vec<Question> = match (env, questions) {
        (Some(e), _) => SynthEnv::load(e)?.questions(),
        (None, Some(q)) => read_jsonl(q)?,
        (None, None) => return Err(Error::Config("gold answers need --env or --questions".into())),
    };
    Ok(qs.into_iter().map(|q| (q.id, q.gold_answer)).collect())
}

fn finish_eval(out: Option<&PathBuf>, v: Value) -> Result<Value> {
    if let Some(p) = out {
        write_json(p, &v)?;
    }
    Ok(ok(v))
}

fn eval(cmd: EvalCommand) -> Result<Value> {
    match cmd {
        EvalCommand::StepAcc { verifier, bench, threshold, rule, out } => {
            let v = VerifierParams::load(&verifier)?;
            let records: Vec<BenchmarkRecord> = read_jsonl(&bench)?;
            let r = step_accuracy(&v, &records, threshold, rule.into())?;
            finish_eval(
                out.as_ref(),
                json!({
                    "metric": "step_accuracy",
                    "accuracy": r.accuracy,
                    "per_step_accuracy": r.per_step_accuracy,
                    "evaluated": r.evaluated,
                    "skipped": r.skipped,
                }),
            )
        }
        EvalCommand::Bon { verifier, pool, env, questions, out } => {
            let v = VerifierParams::load(&verifier)?;
            let gold = gold_answers(env.as_ref(), questions.as_ref())?;
            let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
            for t in read_jsonl::<Trajectory>(&pool)? {
                groups.entry(t.question_id.clone()).or_default().push(t);
            }
            let r = bon_accuracy(&v, &groups, &gold)?;
            finish_eval(
                out.as_ref(),
                json!({
                    "metric": "best_of_n",
                    "accuracy": r.accuracy,
                    "pass_at_1": pass_at_1(&groups, &gold),
                    "evaluated": r.evaluated,
                    "skipped": r.skipped,
                }),
            )
        }
        EvalCommand::Gap { source, verifier, probe, seed, rollout, out } => {
            let src = source.open()?;
            let v = VerifierParams::load(&verifier)?;
            let probe: Vec<Trajectory> = read_jsonl(&probe)?;
            let r = reasoner_verifier_gap(
                &v,
                &*src.reasoner,
                &src.questions,
                &probe,
                rollout.rollouts,
                rollout.threshold,
                rollout.temperature,
                seed,
            )?;
            finish_eval(out.as_ref(), json!({ "metric": "gap", "gap": r.gap, "prefixes": r.prefixes, "cost": r.ledger }))
        }
        EvalCommand::Sve { verifier, pool, env, threshold, out } => {
            let v = VerifierParams::load(&verifier)?;
            let env = SynthEnv::load(&env)?;
            let pool: Vec<Trajectory> = read_jsonl(&pool)?;
            let (mut pre, mut oracle, mut correct) = (Vec::new(), Vec::new(), Vec::new());
            for t in &pool {
                let c = env.question(&t.question_id)?.gold_answer.trim() == t.final_answer.trim();
                pre.push(preassign(&v.score(&t.question_id, &t.steps)?, c, threshold)?);
                oracle.push(env.oracle_labels(t)?);
                correct.push(c);
            }
            let rate = self_verification_error_rate(&pre, &oracle, &correct)?;
            finish_eval(out.as_ref(), json!({ "metric": "sve", "rate": rate, "trajectories": pool.len() }))
        }
    }
}

fn bench_cost(a: BenchCostArgs) -> Result<Value> {
    let src = a.source.open()?;
    let verifier = load_verifier(&a.verifier)?;
    let trajectories: Vec<Trajectory> = read_jsonl(&a.input)?;
    let dataset = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let inputs = CostInputs {
        reasoner: &*src.reasoner,
        scorer: &verifier,
        questions: &src.questions,
        trajectories: &trajectories,
        threshold: a.rollout.threshold,
        settings: RolloutSettings { count: a.rollout.rollouts, temperature: a.rollout.temperature, seed: a.seed },
        record_wall_time: a.wall_time,
        dataset,
    };
    let report = compare_costs(&a.methods, &inputs)?;
    report.write_json(&a.out)?;
    if let Some(c) = &a.csv {
        report.write_csv(c)?;
    }
    let mut ratios = serde_json::Map::new();
    if a.methods.contains(&LabelMethod::Saps) {
        for m in [LabelMethod::Shepherd, LabelMethod::Omega] {
            if let Some(r) = report.flop_ratio(m, LabelMethod::Saps) {
                ratios.insert(format!("{}/saps", m.as_str()), json!(r));
            }
        }
    }
    Ok(ok(json!({ "out": a.out, "trajectories": report.trajectories, "flop_ratios": ratios })))
}

fn export(a: ExportArgs) -> Result<Value> {
    let (ctx, latest) = open_run(&a.run)?;
    let st = match a.iter {
        Some(t) if t != latest.t => {
            if t > latest.t {
                return Err(Error::Config(format!("iteration {t} does not exist; the run is at {}", latest.t)));
            }
            load_state(&ctx, t)?
        }
        _ => latest,
    };
    let files = export_state(&st, &a.out)?;
    Ok(ok(json!({
        "iteration": st.t,
        "files": files,
        "pool": st.pool.len(),
        "labels": st.labels.len(),
        "prefs": st.prefs.len(),
    })))
}
