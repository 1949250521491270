mod common;

use std::sync::Arc;

use sapo_core::config::RunConfig;
use sapo_core::engine::make_demos;
use sapo_core::evalkit::OracleScorer;
use sapo_core::prefs::{align_update, build_pref_pairs, odds_of, orpo_loss, trajectory_reward, AlignConfig, PreferencePair};
use sapo_core::reasoner::{Reasoner, SyntheticReasoner};
use sapo_core::records::{LabeledStepRecord, Provenance};
use sapo_core::synthenv::{greedy_pass_rate, EnvParams, PolicyParams, SynthEnv};
use sapo_core::verifier::{
    export_step_dataset, import_step_dataset, mse_loss, score_steps, train_mse, StepLabelDataset, StepScorer, TrainConfig,
    VerifierParams,
};
use sapo_core::{Trajectory, TrajectorySource};

fn oracle_dataset(env: &SynthEnv) -> (StepLabelDataset, Vec<Trajectory>) {
    let mut data = StepLabelDataset::new();
    let mut paths = Vec::new();
    for q in env.questions() {
        for acts in env.enumerate_completions::<&str>(&q.id, &[]).unwrap() {
            let t = env.trajectory_from_actions(&q.id, &acts, TrajectorySource::Sampled, 0).unwrap();
            data.push_trajectory(&t, &env.oracle_labels(&t).unwrap(), 0, Provenance::Shepherd).unwrap();
            paths.push(t);
        }
    }
    (data, paths)
}

const TRAIN: TrainConfig = TrainConfig { learning_rate: 2.0, epochs: 30, batch_size: 16, seed: 1 };

#[test]
fn trained_verifier_reproduces_held_in_labels() {
    let env = common::small_env(10);
    let (data, paths) = oracle_dataset(&env);
    let init = VerifierParams::zeros(1 << 16, 0).unwrap();
    let (v, trace) = train_mse(&init, &data, &TRAIN).unwrap();
    assert!(trace.last().unwrap() < &trace[0]);
    let (mut hit, mut n) = (0, 0);
    for t in &paths {
        let (scores, labels) = score_steps(&v, t, 0.5).unwrap();
        assert!(scores.as_slice().iter().all(|s| *s > 0.0 && *s < 1.0));
        for (l, o) in labels.iter().zip(env.oracle_labels(t).unwrap().labels()) {
            hit += usize::from(l == o);
            n += 1;
        }
    }
    let frac = hit as f64 / n as f64;
    assert!(frac >= 0.9, "{frac}");
}

#[test]
fn score_length_matches_step_count() {
    let env = common::env(EnvParams { depth: 8, questions: 10, ..Default::default() });
    let r = common::uniform_reasoner(&env);
    let v = VerifierParams::zeros(4096, 2).unwrap();
    let mut n = 0;
    for q in env.questions() {
        let (ts, _) = r.sample(&q, 100, 1.0, 3).unwrap();
        for t in ts {
            assert_eq!(v.score(&t.question_id, &t.steps).unwrap().len(), t.len());
            n += 1;
        }
    }
    assert_eq!(n, 1000);
}

#[test]
fn retraining_on_a_superset_does_not_raise_the_loss() {
    let env = common::small_env(2);
    let (all, _) = oracle_dataset(&env);
    let half = StepLabelDataset::from_records(all.records()[..all.len() / 2].to_vec()).unwrap();
    let cfg = TrainConfig { learning_rate: 0.5, epochs: 10, batch_size: 8, seed: 4 };
    let init = VerifierParams::zeros(1 << 12, 0).unwrap();
    let (v1, t1) = train_mse(&init, &half, &cfg).unwrap();
    assert!(t1.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{t1:?}");
    // warm start continues from where the first round finished
    let start = mse_loss(&v1, &all).unwrap();
    let (_, t2) = train_mse(&v1, &all, &cfg).unwrap();
    assert!(*t2.last().unwrap() <= start + 1e-6, "{start} {t2:?}");
    assert_eq!(train_mse(&v1, &all, &cfg).unwrap().0, train_mse(&v1, &all, &cfg).unwrap().0);
}

#[test]
fn dataset_export_round_trips_with_provenance() {
    let tags = [Provenance::OmegaInit, Provenance::Saps, Provenance::Shepherd, Provenance::Expansion, Provenance::OutcomeOnly];
    let records: Vec<LabeledStepRecord> = (0..100)
        .map(|i| LabeledStepRecord {
            question_id: format!("q{}", i % 7),
            prefix_len: 1 + i % 3,
            steps: (0..=i % 3).map(|j| format!("step {i} {j}")).collect(),
            label: (i % 2) as u8,
            provenance: tags[i % 5],
        })
        .collect();
    let data = StepLabelDataset::from_records(records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    assert_eq!(export_step_dataset(&data, &path).unwrap(), 100);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 100);
    assert_eq!(import_step_dataset(&path).unwrap(), data);

    let empty = dir.path().join("e.jsonl");
    assert_eq!(export_step_dataset(&StepLabelDataset::new(), &empty).unwrap(), 0);
    assert!(import_step_dataset(&empty).unwrap().is_empty());
}

fn pair_for(env: &SynthEnv) -> PreferencePair {
    let q = &env.questions()[0];
    let w = env.demo_trajectory(&q.id, 0).unwrap();
    let acts: Vec<usize> = vec![env.branching() - 1; env.depth()];
    let mut l = env.trajectory_from_actions(&q.id, &acts, TrajectorySource::Sampled, 0).unwrap();
    if l.steps == w.steps {
        l = env.trajectory_from_actions(&q.id, &vec![0; env.depth()], TrajectorySource::Sampled, 0).unwrap();
    }
    PreferencePair { question_id: q.id.clone(), winner_steps: w.steps, loser_steps: l.steps, reward_w: 1.0, reward_l: 0.0 }
}

#[test]
fn one_pair_widens_its_log_odds_gap() {
    let env = common::small_env(6);
    let pair = pair_for(&env);
    let p0 = PolicyParams::uniform(&env);
    let gap = |p: &PolicyParams| {
        odds_of(p, &env, &pair.question_id, &pair.winner_steps, 1.0).unwrap().log_odds
            - odds_of(p, &env, &pair.question_id, &pair.loser_steps, 1.0).unwrap().log_odds
    };
    let cfg = AlignConfig { beta: 0.1, learning_rate: 0.5, epochs: 50, batch_size: 1, temperature: 1.0, seed: 0 };
    let (p1, trace) = align_update(&p0, &env, std::slice::from_ref(&pair), &cfg).unwrap();
    assert!(gap(&p1) > gap(&p0));
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(align_update(&p0, &env, &[], &cfg).is_err());
}

#[test]
fn zero_beta_is_supervised_learning_on_winners() {
    let env = common::small_env(6);
    let pair = pair_for(&env);
    let p0 = PolicyParams::uniform(&env);
    let out = orpo_loss(&p0, &env, &pair, 0.0, 1.0).unwrap();
    let mut grad = vec![0.0; p0.num_params()];
    p0.accumulate_log_prob_grad(&env, &pair.question_id, &pair.winner_steps, 1.0, -1.0, &mut grad).unwrap();
    assert_eq!(out.grad, grad);
    let cfg = AlignConfig { beta: 0.0, learning_rate: 0.5, epochs: 5, batch_size: 1, temperature: 1.0, seed: 0 };
    let (p1, _) = align_update(&p0, &env, std::slice::from_ref(&pair), &cfg).unwrap();
    assert!(orpo_loss(&p1, &env, &pair, 0.0, 1.0).unwrap().nll < out.nll);
}

#[test]
fn equal_probabilities_cost_beta_log_two() {
    let env = common::small_env(6);
    let mut pair = pair_for(&env);
    pair.loser_steps = pair.winner_steps.clone();
    let out = orpo_loss(&PolicyParams::uniform(&env), &env, &pair, 0.1, 1.0).unwrap();
    assert!((out.loss - out.nll - 0.1 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn extreme_logits_stay_finite() {
    let env = common::small_env(6);
    let pair = pair_for(&env);
    let mut p = PolicyParams::uniform(&env);
    for (i, l) in p.logits.iter_mut().enumerate() {
        *l = if i % 2 == 0 { 50.0 } else { -50.0 };
    }
    let out = orpo_loss(&p, &env, &pair, 0.1, 1.0).unwrap();
    assert!(out.loss.is_finite() && out.grad.iter().all(|g| g.is_finite()));
}

#[test]
fn alignment_on_oracle_preferences_beats_supervised_policy() {
    let cfg = RunConfig { seed: Some(3), ..Default::default() };
    let env = Arc::new(SynthEnv::generate(&cfg.env_params(3)).unwrap());
    let demos = make_demos(&env, cfg.demo_fraction, 3).unwrap();
    let sft = PolicyParams::uniform(&env).sft_update(&env, &demos, cfg.sft_lr, cfg.sft_epochs).unwrap();
    let r = SyntheticReasoner::new(env.clone(), sft.clone(), 1.0).unwrap();
    let oracle = OracleScorer { env: &env };
    let mut scored = Vec::new();
    for q in env.questions() {
        let (ts, _) = r.sample(&q, cfg.samples_per_question, 1.0, 17).unwrap();
        for t in ts {
            let reward = trajectory_reward(&oracle.score(&t.question_id, &t.steps).unwrap()).unwrap();
            scored.push((t, reward));
        }
    }
    let pairs = build_pref_pairs(&scored, cfg.pref_threshold, cfg.max_pairs_per_question).unwrap();
    assert!(!pairs.is_empty());
    let align = AlignConfig {
        beta: cfg.orpo_beta,
        learning_rate: cfg.align_lr,
        epochs: cfg.align_epochs,
        batch_size: cfg.align_batch,
        temperature: 1.0,
        seed: 5,
    };
    let (aligned, _) = align_update(&sft, &env, &pairs, &align).unwrap();
    let before = greedy_pass_rate(&env, &sft).unwrap();
    let after = greedy_pass_rate(&env, &aligned).unwrap();
    assert!(after >= before + 0.05, "{before} -> {after}");
}
