use std::collections::HashSet;

use crate::keys::{canonical_key, normalize_step};
use crate::types::Trajectory;

/// `1 - levenshtein / max_len` over normalized step sequences, with steps as
/// the edit alphabet. Two empty sequences are identical.
pub fn normalized_edit_similarity<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let na: Vec<String> = a.iter().map(|s| normalize_step(s.as_ref())).collect();
    let nb: Vec<String> = b.iter().map(|s| normalize_step(s.as_ref())).collect();
    let d = strsim::generic_levenshtein(&na, &nb);
    1.0 - d as f64 / longest as f64
}

/// Keeps candidates whose canonical key is new for their question and whose
/// similarity to every already-kept or existing trajectory of the same
/// question is below `similarity_threshold`. Candidate order is preserved.
pub fn dedup_filter(candidates: Vec<Trajectory>, existing: &[Trajectory], similarity_threshold: f64) -> Vec<Trajectory> {
    let threshold = similarity_threshold.clamp(0.0, 1.0);
    let scoped = |t: &Trajectory| (t.question_id.clone(), canonical_key(t));
    let mut keys: HashSet<(String, String)> = existing.iter().map(scoped).collect();
    let mut kept: Vec<Trajectory> = Vec::new();
    for c in candidates {
        if !keys.insert(scoped(&c)) {
            continue;
        }
        let near_dup = existing
            .iter()
            .chain(kept.iter())
            .filter(|o| o.question_id == c.question_id)
            .any(|o| normalized_edit_similarity(&o.steps, &c.steps) >= threshold);
        if !near_dup {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TrajectorySource;

    fn traj(steps: &[&str]) -> Trajectory {
        Trajectory::new("q", steps.iter().map(|s| s.to_string()).collect(), "x", TrajectorySource::Sampled, 0).unwrap()
    }

    /// Textbook O(nm) edit distance, kept separate from the crate's path.
    fn dp_levenshtein(a: &[&str], b: &[&str]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn identical_candidate_kept_once() {
        let out = dedup_filter(vec![traj(&["a", "b"]), traj(&["a", "b"])], &[], 0.9);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn threshold_one_only_removes_exact_keys() {
        let out = dedup_filter(
            vec![traj(&["a", "b", "c"]), traj(&["a", "b", "d"]), traj(&["a ", " b", "c"])],
            &[],
            1.0,
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn one_of_ten_steps_differs() {
        let a = ["s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9"];
        let mut b = a;
        b[4] = "other";
        let oracle = 1.0 - dp_levenshtein(&a, &b) as f64 / 10.0;
        assert!((oracle - 0.9).abs() < 1e-12);
        assert!((normalized_edit_similarity(&a, &b) - oracle).abs() < 1e-12);
        let out = dedup_filter(vec![traj(&a), traj(&b)], &[], 0.85);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].steps[4], "s4");
    }

    #[test]
    fn similarity_matches_dp_oracle() {
        let cases: [(&[&str], &[&str]); 4] = [
            (&["a", "b", "c"], &["a", "c"]),
            (&["x"], &["y", "z", "x"]),
            (&[], &["a"]),
            (&["p", "q", "r", "s"], &["s", "r", "q", "p"]),
        ];
        for (a, b) in cases {
            let expect = 1.0 - dp_levenshtein(a, b) as f64 / a.len().max(b.len()) as f64;
            assert!((normalized_edit_similarity(a, b) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn existing_items_block_candidates_only_within_question() {
        let mut other = traj(&["a", "b"]);
        other.question_id = "other".into();
        let out = dedup_filter(vec![traj(&["a", "b"]), traj(&["a", "c"])], &[other.clone()], 0.9);
        assert_eq!(out.len(), 2);
        let out = dedup_filter(vec![traj(&["a", "b"]), traj(&["a", "c"])], &[traj(&["a", "b"]), other], 0.9);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].steps, vec!["a", "c"]);
    }
}
