mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapo_core::config::RunConfig;
use sapo_core::engine::{iteration_dir, run};
use sapo_core::evalkit::{
    bon_accuracy, emit_report, pass_at_1, reasoner_verifier_gap, self_verification_error_rate, step_accuracy,
    ConstantScorer, FirstErrorRule, OracleScorer,
};
use sapo_core::reasoner::{Reasoner, RolloutCount, SyntheticReasoner};
use sapo_core::records::BenchmarkRecord;
use sapo_core::saps::preassign;
use sapo_core::synthenv::{EnvParams, PolicyParams, SynthEnv};
use sapo_core::verifier::{StepScorer, VerifierParams};
use sapo_core::{Trajectory, TrajectorySource};

fn all_paths(env: &SynthEnv) -> Vec<Trajectory> {
    let mut out = Vec::new();
    for q in env.questions() {
        for a in env.enumerate_completions::<&str>(&q.id, &[]).unwrap() {
            out.push(env.trajectory_from_actions(&q.id, &a, TrajectorySource::Sampled, 0).unwrap());
        }
    }
    out
}

fn benchmark(env: &SynthEnv, paths: &[Trajectory]) -> Vec<BenchmarkRecord> {
    paths
        .iter()
        .map(|t| {
            let q = env.question(&t.question_id).unwrap();
            BenchmarkRecord {
                question_id: q.id.clone(),
                prompt: q.prompt.clone(),
                gold_answer: q.gold_answer.clone(),
                steps: t.steps.clone(),
                first_error: env.oracle_labels(t).unwrap().first_error().map_or(-1, |v| v as i64),
            }
        })
        .collect()
}

#[test]
fn oracle_verifier_has_perfect_step_accuracy() {
    let env = common::small_env(2);
    let paths = all_paths(&env);
    let b = benchmark(&env, &paths);
    let r = step_accuracy(&OracleScorer { env: &env }, &b, 0.5, FirstErrorRule::Threshold).unwrap();
    assert_eq!((r.accuracy, r.per_step_accuracy, r.evaluated), (1.0, 1.0, b.len()));

    let c = step_accuracy(&ConstantScorer(0.5), &b, 0.5, FirstErrorRule::Threshold).unwrap();
    let clean = b.iter().filter(|r| r.first_error == -1).count() as f64 / b.len() as f64;
    assert!(c.details.iter().all(|d| d.predicted == -1));
    assert_eq!(c.accuracy, clean);
}

fn groups(ts: Vec<Trajectory>) -> BTreeMap<String, Vec<Trajectory>> {
    let mut g: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in ts {
        g.entry(t.question_id.clone()).or_default().push(t);
    }
    g
}

#[test]
fn best_of_one_is_pass_at_one_for_any_verifier() {
    let env = common::env(EnvParams { depth: 6, questions: 20, ..Default::default() });
    let r = common::uniform_reasoner(&env);
    let gold: BTreeMap<String, String> = env.questions().into_iter().map(|q| (q.id, q.gold_answer)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = VerifierParams::zeros(1024, 1).unwrap();
    v.weights_mut().iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
    let scorers: [&dyn StepScorer; 3] = [&OracleScorer { env: &env }, &ConstantScorer(0.3), &v];
    for seed in 0..5 {
        let mut ts = Vec::new();
        for q in env.questions() {
            ts.extend(r.sample(&q, 1, 1.0, seed).unwrap().0);
        }
        let g = groups(ts);
        for s in scorers {
            assert_eq!(bon_accuracy(s, &g, &gold).unwrap().accuracy, pass_at_1(&g, &gold));
        }
    }
}

#[test]
fn oracle_best_of_n_never_trails_pass_at_one() {
    let env = common::env(EnvParams { depth: 8, questions: 30, ..Default::default() });
    let r = common::uniform_reasoner(&env);
    let gold: BTreeMap<String, String> = env.questions().into_iter().map(|q| (q.id, q.gold_answer)).collect();
    let mut strictly = false;
    for seed in 0..10 {
        let mut ts = Vec::new();
        for q in env.questions() {
            ts.extend(r.sample(&q, 8, 1.0, seed).unwrap().0);
        }
        let g = groups(ts);
        let bon = bon_accuracy(&OracleScorer { env: &env }, &g, &gold).unwrap().accuracy;
        let p1 = pass_at_1(&g, &gold);
        assert!(bon >= p1, "seed {seed}: {bon} < {p1}");
        strictly |= bon > p1;
    }
    assert!(strictly);
}

#[test]
fn oracle_verifier_has_no_gap_under_exhaustive_rollouts() {
    let env = common::small_env(5);
    let r = common::uniform_reasoner(&env);
    let probe = all_paths(&env);
    let g = reasoner_verifier_gap(&OracleScorer { env: &env }, &r, &env.questions(), &probe, RolloutCount::Exhaustive, 0.5, 1.0, 0)
        .unwrap();
    assert_eq!(g.gap, 0.0);
    assert_eq!(g.prefixes, probe.iter().map(|t| t.len()).sum::<usize>());
}

#[test]
fn constant_verifier_gap_equals_the_dead_share() {
    let env = common::env(EnvParams { depth: 1, questions: 40, width: 3, difficulty: 0.5, seed: 3, ..Default::default() });
    let r = common::uniform_reasoner(&env);
    let qs = env.questions();
    let (mut alive, mut dead) = (Vec::new(), Vec::new());
    for t in all_paths(&env) {
        if env.oracle_labels(&t).unwrap().labels()[0] == 1 {
            alive.push(t);
        } else {
            dead.push(t);
        }
    }
    let n = alive.len().min(dead.len());
    assert!(n > 10);
    let probe: Vec<Trajectory> = alive.into_iter().take(n).chain(dead.into_iter().take(n)).collect();
    let g = reasoner_verifier_gap(&ConstantScorer(0.5), &r, &qs, &probe, RolloutCount::Exhaustive, 0.5, 1.0, 0).unwrap();
    assert_eq!(g.gap, 0.5);
}

#[test]
fn sve_rate_fixtures() {
    let env = common::small_env(7);
    let paths = all_paths(&env);
    let oracle: Vec<_> = paths.iter().map(|t| env.oracle_labels(t).unwrap()).collect();
    let ok: Vec<bool> = paths.iter().map(|t| env.question(&t.question_id).unwrap().gold_answer == t.final_answer).collect();
    assert_eq!(self_verification_error_rate(&oracle, &oracle, &ok).unwrap(), 0.0);
    // off by one on every wrong result
    let mut off = Vec::new();
    let (mut o2, mut ok2) = (Vec::new(), Vec::new());
    for ((o, t), c) in oracle.iter().zip(&paths).zip(&ok) {
        if *c {
            continue;
        }
        let fe = o.first_error().unwrap();
        let shifted = if fe + 1 < t.len() { fe + 1 } else { fe - 1 };
        off.push(sapo_core::LabelSequence::with_first_error(t.len(), Some(shifted)).unwrap());
        o2.push(o.clone());
        ok2.push(false);
    }
    assert_eq!(self_verification_error_rate(&off, &o2, &ok2).unwrap(), 1.0);
    assert!(self_verification_error_rate(&off[1..], &o2, &ok2).is_err());
}

fn sve_of(env: &std::sync::Arc<SynthEnv>, verifier: &VerifierParams, policy: &PolicyParams) -> f64 {
    let r = SyntheticReasoner::new(env.clone(), policy.clone(), 1.0).unwrap();
    let (mut pre, mut oracle, mut ok) = (Vec::new(), Vec::new(), Vec::new());
    for q in env.questions() {
        for t in r.sample(&q, 8, 1.0, 77).unwrap().0 {
            let c = q.is_correct(&t.final_answer);
            pre.push(preassign(&verifier.score(&t.question_id, &t.steps).unwrap(), c, 0.5).unwrap());
            oracle.push(env.oracle_labels(&t).unwrap());
            ok.push(c);
        }
    }
    self_verification_error_rate(&pre, &oracle, &ok).unwrap()
}

#[test]
fn synchronized_pairs_self_verify_better_than_mismatched_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { seed: Some(7), ..Default::default() };
    run(&cfg, dir.path(), 3).unwrap();
    let env = std::sync::Arc::new(SynthEnv::load(&dir.path().join("env.json")).unwrap());
    let load = |t: usize| {
        let d = iteration_dir(dir.path(), t);
        (
            VerifierParams::load(&d.join("verifier.ckpt")).unwrap(),
            PolicyParams::load(&d.join("policy.ckpt")).unwrap(),
        )
    };
    let (v1, _) = load(1);
    let (v3, r3) = load(3);
    let synced = sve_of(&env, &v3, &r3);
    let stale = sve_of(&env, &v1, &r3);
    assert!(synced < stale, "V3-R3 {synced} vs V1-R3 {stale}");
}

#[test]
fn report_emission_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { seed: Some(2), env_questions: 10, env_depth: 5, ..Default::default() };
    let out = run(&cfg, &dir.path().join("run"), 3).unwrap();
    let a = dir.path().join("a");
    let files = emit_report(&out.state.metrics, &a).unwrap();
    assert_eq!(files.len(), 4);
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap().lines().count(), 5);
    assert!(files.iter().skip(1).all(|f| f.extension().unwrap() == "svg"));
    let before = common::tree(&a);
    emit_report(&out.state.metrics, &a).unwrap();
    assert_eq!(common::tree(&a), before);
    let empty = dir.path().join("e");
    assert_eq!(emit_report(&[], &empty).unwrap().len(), 1);
}
