#![allow(dead_code)]

pub mod mock;

use std::path::Path;
use std::sync::Arc;

use sapo_core::config::RunConfig;
use sapo_core::engine::{self, IterationState, RunContext};
use sapo_core::reasoner::SyntheticReasoner;
use sapo_core::synthenv::{EnvParams, PolicyParams, SynthEnv};

pub fn env(params: EnvParams) -> Arc<SynthEnv> {
    Arc::new(SynthEnv::generate(&params).expect("env generates"))
}

pub fn small_env(seed: u64) -> Arc<SynthEnv> {
    env(EnvParams { depth: 4, questions: 6, width: 6, difficulty: 0.3, seed, ..Default::default() })
}

pub fn uniform_reasoner(env: &Arc<SynthEnv>) -> SyntheticReasoner {
    SyntheticReasoner::new(env.clone(), PolicyParams::uniform(env), 1.0).unwrap()
}

/// An initialized default run: supervised policy, first pool and first
/// verifier.
pub fn initialized(seed: u64, root: &Path) -> (RunContext, IterationState) {
    let cfg = RunConfig { seed: Some(seed), ..Default::default() };
    let env = Arc::new(engine::load_or_generate_env(&cfg).unwrap());
    let demos = engine::make_demos(&env, cfg.demo_fraction, seed).unwrap();
    engine::initialize(&cfg, env, demos, root).unwrap()
}

/// Central finite-difference relative error `|a - n| / max(|a|, |n|)` in the
/// Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
