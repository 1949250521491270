//! Synthetic layered-DAG reasoning environment with an exhaustive oracle.
//!
//! Every question owns a layered DAG rooted at its own state. A trajectory is
//! a sequence of `depth` actions (steps `"a0"`, `"a1"`, ...); the terminal
//! state it reaches carries the final answer. A prefix is correct iff the
//! gold answer is still reachable from the state it ends in, which the
//! [`OracleCache`] answers exactly.

mod policy;

pub use policy::{greedy_pass_rate, PolicyParams};

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelSequence, Question, Trajectory, TrajectorySource};

pub const ENV_FORMAT_VERSION: u32 = 1;

/// Step text for an action id.
pub fn action_step(action: usize) -> String {
    format!("a{action}")
}

pub fn parse_action(step: &str) -> Option<usize> {
    step.trim().strip_prefix('a')?.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvQuestion {
    pub id: String,
    pub prompt: String,
    pub gold_answer: String,
    pub root: usize,
}

/// Serialized environment document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub version: u32,
    pub depth: usize,
    pub branching: usize,
    /// Successor of each state under each action; empty for terminal states.
    pub transitions: Vec<Vec<usize>>,
    /// Final answer of each terminal state; `None` for internal states.
    pub answers: Vec<Option<String>>,
    pub questions: Vec<EnvQuestion>,
}

/// Generation knobs for [`SynthEnv::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    pub depth: usize,
    pub branching: usize,
    pub questions: usize,
    /// States per layer below each root.
    pub width: usize,
    /// Probability that an action from a gold-reaching state leads to a state
    /// from which the gold answer is unreachable.
    pub difficulty: f64,
    pub answer_alphabet: usize,
    pub seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams { depth: 8, branching: 3, questions: 50, width: 12, difficulty: 0.2, answer_alphabet: 10, seed: 0 }
    }
}

/// Memo of the answers reachable from every state, filled bottom-up.
#[derive(Debug, Clone)]
pub struct OracleCache {
    reachable: Vec<BTreeSet<String>>,
}

impl OracleCache {
    fn build(spec: &EnvSpec, order_bottom_up: &[usize]) -> Self {
        let mut reachable = vec![BTreeSet::new(); spec.transitions.len()];
        for &s in order_bottom_up {
            if let Some(a) = &spec.answers[s] {
                reachable[s].insert(a.clone());
            } else {
                let mut set = BTreeSet::new();
                for &n in &spec.transitions[s] {
                    set.extend(reachable[n].iter().cloned());
                }
                reachable[s] = set;
            }
        }
        OracleCache { reachable }
    }

    pub fn reachable(&self, state: usize) -> &BTreeSet<String> {
        &self.reachable[state]
    }
}

/// A validated environment plus its oracle cache. Read-only after construction.
#[derive(Debug, Clone)]
pub struct SynthEnv {
    spec: EnvSpec,
    layer: Vec<usize>,
    by_id: HashMap<String, usize>,
    oracle: OracleCache,
}

impl SynthEnv {
    pub fn generate(params: &EnvParams) -> Result<Self> {
        if params.branching < 2 || params.depth < 1 || params.width < 2 || params.questions == 0 {
            return Err(Error::InvalidArgument(format!(
                "env needs branching >= 2, depth >= 1, width >= 2, questions >= 1 (got {params:?})"
            )));
        }
        if !(0.0..1.0).contains(&params.difficulty) {
            return Err(Error::InvalidArgument(format!("difficulty {} outside [0, 1)", params.difficulty)));
        }
        if params.answer_alphabet < 2 {
            return Err(Error::InvalidArgument("answer alphabet needs at least 2 answers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let (b, w) = (params.branching, params.width);
        let n_alive = if params.difficulty == 0.0 {
            w
        } else {
            ((w as f64 * (1.0 - params.difficulty)).round() as usize).clamp(1, w - 1)
        };
        let mut transitions: Vec<Vec<usize>> = Vec::new();
        let mut answers: Vec<Option<String>> = Vec::new();
        let mut questions = Vec::with_capacity(params.questions);

        for qi in 0..params.questions {
            let gold_idx = rng.random_range(0..params.answer_alphabet);
            let gold = format!("ans{gold_idx}");
            let root = transitions.len();
            transitions.push(Vec::new());
            answers.push(None);
            let mut prev_alive = vec![root];
            let mut prev_dead: Vec<usize> = Vec::new();
            for l in 1..=params.depth {
                let base = transitions.len();
                let alive: Vec<usize> = (base..base + n_alive).collect();
                let dead: Vec<usize> = (base + n_alive..base + w).collect();
                for s in base..base + w {
                    transitions.push(Vec::new());
                    let ans = if l == params.depth {
                        if s < base + n_alive {
                            Some(gold.clone())
                        } else {
                            let mut k = rng.random_range(0..params.answer_alphabet - 1);
                            if k >= gold_idx {
                                k += 1;
                            }
                            Some(format!("ans{k}"))
                        }
                    } else {
                        None
                    };
                    answers.push(ans);
                }
                for &p in &prev_alive {
                    let mut succ: Vec<usize> = (0..b)
                        .map(|_| {
                            if dead.is_empty() || rng.random::<f64>() >= params.difficulty {
                                *alive.choose(&mut rng).expect("alive layer is non-empty")
                            } else {
                                *dead.choose(&mut rng).expect("dead layer is non-empty")
                            }
                        })
                        .collect();
                    if succ.iter().all(|s| *s >= base + n_alive) {
                        let a = rng.random_range(0..b);
                        succ[a] = *alive.choose(&mut rng).expect("alive layer is non-empty");
                    }
                    transitions[p] = succ;
                }
                for &p in &prev_dead {
                    transitions[p] = (0..b).map(|_| *dead.choose(&mut rng).expect("dead layer is non-empty")).collect();
                }
                prev_alive = alive;
                prev_dead = dead;
            }
            questions.push(EnvQuestion {
                id: format!("q{qi:03}"),
                prompt: format!("question {qi}: take {} steps and reach answer {gold}", params.depth),
                gold_answer: gold,
                root,
            });
        }
        SynthEnv::from_spec(EnvSpec {
            version: ENV_FORMAT_VERSION,
            depth: params.depth,
            branching: params.branching,
            transitions,
            answers,
            questions,
        })
    }

    /// Validates the layered structure and builds the oracle cache.
    pub fn from_spec(spec: EnvSpec) -> Result<Self> {
        if spec.version != ENV_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported env version {}", spec.version)));
        }
        if spec.branching < 2 {
            return Err(Error::Schema("branching must be >= 2".into()));
        }
        let n = spec.transitions.len();
        if spec.answers.len() != n {
            return Err(Error::Schema("answers and transitions differ in length".into()));
        }
        let mut layer = vec![usize::MAX; n];
        let mut order = Vec::new();
        let mut by_id = HashMap::new();
        for (i, q) in spec.questions.iter().enumerate() {
            if q.gold_answer.trim().is_empty() {
                return Err(Error::Schema(format!("question {} has empty gold answer", q.id)));
            }
            if by_id.insert(q.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate question id {}", q.id)));
            }
            if q.root >= n {
                return Err(Error::Schema(format!("question {} root out of range", q.id)));
            }
            if layer[q.root] != usize::MAX {
                return Err(Error::Schema(format!("question {} shares its root", q.id)));
            }
            layer[q.root] = 0;
            let mut frontier = vec![q.root];
            order.push(q.root);
            for l in 0..spec.depth {
                let mut next = Vec::new();
                for &s in &frontier {
                    let succ = &spec.transitions[s];
                    if succ.len() != spec.branching || spec.answers[s].is_some() {
                        return Err(Error::Schema(format!("state {s} at layer {l} is not a proper internal state")));
                    }
                    for &t in succ {
                        if t >= n {
                            return Err(Error::Schema(format!("state {s} points outside the table")));
                        }
                        if layer[t] == usize::MAX {
                            layer[t] = l + 1;
                            next.push(t);
                            order.push(t);
                        } else if layer[t] != l + 1 {
                            return Err(Error::Schema(format!("state {t} reached at two depths; DAG is not layered")));
                        }
                    }
                }
                frontier = next;
            }
            for &s in &frontier {
                if !spec.transitions[s].is_empty() || spec.answers[s].is_none() {
                    return Err(Error::Schema(format!("terminal state {s} lacks an answer or has successors")));
                }
            }
        }
        order.reverse();
        let oracle = OracleCache::build(&spec, &order);
        Ok(SynthEnv { spec, layer, by_id, oracle })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: EnvSpec = serde_json::from_str(&text)?;
        Self::from_spec(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.spec)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    pub fn branching(&self) -> usize {
        self.spec.branching
    }

    pub fn num_states(&self) -> usize {
        self.spec.transitions.len()
    }

    pub fn oracle(&self) -> &OracleCache {
        &self.oracle
    }

    pub fn env_questions(&self) -> &[EnvQuestion] {
        &self.spec.questions
    }

    pub fn questions(&self) -> Vec<Question> {
        self.spec.questions.iter().map(to_question).collect()
    }

    pub fn question(&self, id: &str) -> Result<&EnvQuestion> {
        self.by_id
            .get(id)
            .map(|&i| &self.spec.questions[i])
            .ok_or_else(|| Error::UnknownQuestion(id.to_string()))
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.spec.transitions[state].is_empty()
    }

    pub fn successor(&self, state: usize, action: usize) -> usize {
        self.spec.transitions[state][action]
    }

    pub fn layer_of(&self, state: usize) -> usize {
        self.layer[state]
    }

    /// Parses a step sequence into actions, validating it as a path from the
    /// question's root. Returns the actions and the end state.
    pub fn walk<S: AsRef<str>>(&self, question_id: &str, prefix: &[S]) -> Result<(Vec<usize>, usize)> {
        let q = self.question(question_id)?;
        if prefix.len() > self.spec.depth {
            return Err(Error::InvalidPrefix(format!(
                "{} steps exceed depth {}",
                prefix.len(),
                self.spec.depth
            )));
        }
        let mut state = q.root;
        let mut actions = Vec::with_capacity(prefix.len());
        for (j, s) in prefix.iter().enumerate() {
            let a = parse_action(s.as_ref())
                .filter(|&a| a < self.spec.branching)
                .ok_or_else(|| Error::InvalidPrefix(format!("step {j} `{}` is not a valid action", s.as_ref())))?;
            state = self.successor(state, a);
            actions.push(a);
        }
        Ok((actions, state))
    }

    pub fn reachable_answers<S: AsRef<str>>(&self, question_id: &str, prefix: &[S]) -> Result<&BTreeSet<String>> {
        let (_, state) = self.walk(question_id, prefix)?;
        Ok(self.oracle.reachable(state))
    }

    /// 1 iff the gold answer is still reachable after `prefix`.
    pub fn oracle_step_label<S: AsRef<str>>(&self, question_id: &str, prefix: &[S]) -> Result<u8> {
        let q = self.question(question_id)?;
        let reach = self.reachable_answers(question_id, prefix)?;
        Ok(u8::from(reach.contains(&q.gold_answer)))
    }

    /// Exact labels for every prefix `0..=j` of a trajectory.
    pub fn oracle_labels(&self, trajectory: &Trajectory) -> Result<LabelSequence> {
        let q = self.question(&trajectory.question_id)?;
        let (_, mut state) = self.walk::<&str>(&q.id, &[])?;
        let (actions, _) = self.walk(&q.id, &trajectory.steps)?;
        let mut raw = Vec::with_capacity(actions.len());
        for a in actions {
            state = self.successor(state, a);
            raw.push(u8::from(self.oracle.reachable(state).contains(&q.gold_answer)));
        }
        LabelSequence::from_labels(raw)
    }

    /// Answer of a complete path.
    pub fn final_answer<S: AsRef<str>>(&self, question_id: &str, steps: &[S]) -> Result<String> {
        let (_, state) = self.walk(question_id, steps)?;
        self.spec.answers[state]
            .clone()
            .ok_or_else(|| Error::InvalidPrefix(format!("{} steps do not reach a terminal state", steps.len())))
    }

    /// Builds a trajectory record from a complete action sequence.
    pub fn trajectory_from_actions(
        &self,
        question_id: &str,
        actions: &[usize],
        source: TrajectorySource,
        seed: u64,
    ) -> Result<Trajectory> {
        let steps: Vec<String> = actions.iter().map(|&a| action_step(a)).collect();
        let answer = self.final_answer(question_id, &steps)?;
        Trajectory::new(question_id, steps, answer, source, seed)
    }

    /// Every action suffix that completes `prefix` into a full path.
    pub fn enumerate_completions<S: AsRef<str>>(&self, question_id: &str, prefix: &[S]) -> Result<Vec<Vec<usize>>> {
        let (actions, _) = self.walk(question_id, prefix)?;
        let remaining = self.spec.depth - actions.len();
        let b = self.spec.branching;
        let total = b.pow(remaining as u32);
        let mut out = Vec::with_capacity(total);
        for mut code in 0..total {
            let mut full = actions.clone();
            let mut suffix = vec![0; remaining];
            for slot in suffix.iter_mut().rev() {
                *slot = code % b;
                code /= b;
            }
            full.extend(suffix);
            out.push(full);
        }
        Ok(out)
    }

    /// A gold-reaching path for a question, chosen uniformly among
    /// gold-reaching actions at each step.
    pub fn demo_trajectory(&self, question_id: &str, seed: u64) -> Result<Trajectory> {
        let q = self.question(question_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = q.root;
        let mut actions = Vec::with_capacity(self.spec.depth);
        while !self.is_terminal(state) {
            let good: Vec<usize> = (0..self.spec.branching)
                .filter(|&a| self.oracle.reachable(self.successor(state, a)).contains(&q.gold_answer))
                .collect();
            let &a = good
                .choose(&mut rng)
                .ok_or_else(|| Error::InvalidArgument(format!("gold unreachable for {question_id}")))?;
            actions.push(a);
            state = self.successor(state, a);
        }
        self.trajectory_from_actions(question_id, &actions, TrajectorySource::Demo, seed)
    }
}

pub fn to_question(q: &EnvQuestion) -> Question {
    Question { id: q.id.clone(), prompt: q.prompt.clone(), gold_answer: q.gold_answer.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// depth 3, branching 2, one question, a binary tree whose 8 leaves carry
    /// distinct answers `l0..l7` (leaf index = action bits).
    pub(crate) fn distinct_leaf_tree() -> SynthEnv {
        let mut transitions = Vec::new();
        let mut answers = Vec::new();
        // node ids: breadth-first binary heap layout
        for i in 0..15usize {
            if i < 7 {
                transitions.push(vec![2 * i + 1, 2 * i + 2]);
                answers.push(None);
            } else {
                transitions.push(vec![]);
                answers.push(Some(format!("l{}", i - 7)));
            }
        }
        let spec = EnvSpec {
            version: ENV_FORMAT_VERSION,
            depth: 3,
            branching: 2,
            transitions,
            answers,
            questions: vec![EnvQuestion { id: "t".into(), prompt: "tree".into(), gold_answer: "l5".into(), root: 0 }],
        };
        SynthEnv::from_spec(spec).unwrap()
    }

    #[test]
    fn root_of_distinct_leaf_tree_reaches_all_eight() {
        let env = distinct_leaf_tree();
        let all = env.reachable_answers::<&str>("t", &[]).unwrap();
        assert_eq!(all.len(), 8);
        let leaf = env.reachable_answers("t", &["a1", "a0", "a1"]).unwrap();
        assert_eq!(leaf.iter().collect::<Vec<_>>(), vec!["l5"]);
    }

    #[test]
    fn oracle_labels_follow_gold_reachability() {
        let env = distinct_leaf_tree();
        // l5 = bits 101
        assert_eq!(env.oracle_step_label("t", &["a1", "a0", "a1"]).unwrap(), 1);
        assert_eq!(env.oracle_step_label("t", &["a0"]).unwrap(), 0);
        assert_eq!(env.oracle_step_label("t", &["a1", "a1"]).unwrap(), 0);
        assert!(matches!(env.oracle_step_label("nope", &["a0"]), Err(Error::UnknownQuestion(_))));
        assert!(matches!(env.oracle_step_label("t", &["a2"]), Err(Error::InvalidPrefix(_))));
        assert!(matches!(env.oracle_step_label("t", &["a0", "a0", "a0", "a0"]), Err(Error::InvalidPrefix(_))));
    }

    #[test]
    fn single_answer_env_has_singleton_root_set() {
        let env = SynthEnv::generate(&EnvParams { difficulty: 0.0, questions: 3, depth: 4, ..Default::default() })
            .unwrap();
        for q in env.env_questions() {
            let set = env.reachable_answers::<&str>(&q.id, &[]).unwrap();
            assert_eq!(set.len(), 1);
            assert!(set.contains(&q.gold_answer));
        }
    }

    #[test]
    fn generated_env_round_trips_and_is_layered() {
        let env = SynthEnv::generate(&EnvParams { questions: 4, seed: 11, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("env.json");
        env.save(&p).unwrap();
        let back = SynthEnv::load(&p).unwrap();
        assert_eq!(back.spec(), env.spec());
        for q in env.env_questions() {
            assert!(env.oracle().reachable(q.root).contains(&q.gold_answer));
        }
    }

    #[test]
    fn malformed_env_rejected() {
        let mut spec = distinct_leaf_tree().spec().clone();
        spec.answers[14] = None;
        assert!(SynthEnv::from_spec(spec).is_err());
        let mut spec = distinct_leaf_tree().spec().clone();
        spec.transitions[0] = vec![1, 8];
        assert!(SynthEnv::from_spec(spec).is_err());
    }

    #[test]
    fn demo_reaches_gold() {
        let env = SynthEnv::generate(&EnvParams { questions: 5, seed: 2, ..Default::default() }).unwrap();
        for q in env.env_questions() {
            let d = env.demo_trajectory(&q.id, 1).unwrap();
            assert_eq!(d.final_answer, q.gold_answer);
            assert_eq!(d.len(), env.depth());
        }
    }
}
