//! Stable hashing: canonical trajectory keys and derived RNG seeds.

use sha2::{Digest, Sha256};

use crate::types::Trajectory;

const STEP_SEP: u8 = 0x1f;

/// Trims a step and collapses interior whitespace runs to one space.
pub fn normalize_step(step: &str) -> String {
    step.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Key of a step sequence under the dedup policy: a hash of the normalized
/// step contents in order.
pub fn canonical_steps_key<S: AsRef<str>>(steps: &[S]) -> String {
    let mut h = Sha256::new();
    for s in steps {
        h.update(normalize_step(s.as_ref()).as_bytes());
        h.update([STEP_SEP]);
    }
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn canonical_key(trajectory: &Trajectory) -> String {
    canonical_steps_key(&trajectory.steps)
}

/// Deterministic 64-bit seed derived from a base seed and a labelled path of
/// parts. Independent of process, platform and thread scheduling.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_is_normalized() {
        assert_eq!(canonical_steps_key(&["a  +  b", " c"]), canonical_steps_key(&["a + b", "c"]));
        assert_ne!(canonical_steps_key(&["a", "b"]), canonical_steps_key(&["b", "a"]));
        // step boundaries matter
        assert_ne!(canonical_steps_key(&["a b"]), canonical_steps_key(&["a", "b"]));
    }

    #[test]
    fn seeds_depend_on_every_part() {
        assert_eq!(derive_seed(1, &["x", "y"]), derive_seed(1, &["x", "y"]));
        assert_ne!(derive_seed(1, &["x", "y"]), derive_seed(2, &["x", "y"]));
        assert_ne!(derive_seed(1, &["xy"]), derive_seed(1, &["x", "y"]));
    }
}
