//! Labeling and generation cost accounting.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Counts of generation work. Ledgers merge by componentwise sum, so partial
/// ledgers from parallel workers reduce in any order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Number of rollout (or sampling) requests, each producing a group of completions.
    pub rollout_batches: u64,
    /// Number of completions generated.
    pub rollouts: u64,
    /// Number of newly generated steps across all completions.
    pub generated_steps: u64,
    pub flop_proxy: f64,
    pub wall_seconds: f64,
}

/// FLOP stand-in: generated steps times a per-step constant.
pub fn flop_proxy(generated_steps: u64, per_step_cost: f64) -> f64 {
    generated_steps as f64 * per_step_cost
}

impl CostLedger {
    /// Ledger for one batch of `rollouts` completions that generated
    /// `generated_steps` new steps in total.
    pub fn batch(rollouts: u64, generated_steps: u64, per_step_cost: f64) -> Self {
        CostLedger {
            rollout_batches: 1,
            rollouts,
            generated_steps,
            flop_proxy: flop_proxy(generated_steps, per_step_cost),
            wall_seconds: 0.0,
        }
    }

    pub fn merge(self, other: CostLedger) -> CostLedger {
        CostLedger {
            rollout_batches: self.rollout_batches + other.rollout_batches,
            rollouts: self.rollouts + other.rollouts,
            generated_steps: self.generated_steps + other.generated_steps,
            flop_proxy: self.flop_proxy + other.flop_proxy,
            wall_seconds: self.wall_seconds + other.wall_seconds,
        }
    }

    pub fn with_wall_seconds(mut self, secs: f64) -> Self {
        self.wall_seconds = secs;
        self
    }

    /// Scales every counter by an integer factor; used to extrapolate a
    /// measured batch to a larger dataset.
    pub fn scaled(self, factor: u64) -> CostLedger {
        CostLedger {
            rollout_batches: self.rollout_batches * factor,
            rollouts: self.rollouts * factor,
            generated_steps: self.generated_steps * factor,
            flop_proxy: self.flop_proxy * factor as f64,
            wall_seconds: self.wall_seconds * factor as f64,
        }
    }
}

impl Add for CostLedger {
    type Output = CostLedger;

    fn add(self, rhs: CostLedger) -> CostLedger {
        self.merge(rhs)
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: CostLedger) {
        *self = self.merge(rhs);
    }
}

impl Sum for CostLedger {
    fn sum<I: Iterator<Item = CostLedger>>(iter: I) -> Self {
        iter.fold(CostLedger::default(), CostLedger::merge)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ledger(r: u64) -> CostLedger {
        CostLedger { rollouts: r, ..Default::default() }
    }

    #[test]
    fn identity_and_arithmetic() {
        let l = CostLedger::batch(5, 20, 2.0);
        assert_eq!(CostLedger::default() + l, l);
        assert_eq!((ledger(10) + ledger(20)).rollouts, 30);
        assert_eq!(flop_proxy(0, 3.0), 0.0);
        assert_eq!(flop_proxy(100, 2.0), 200.0);
    }

    fn arb_ledger() -> impl Strategy<Value = CostLedger> {
        // integral floats keep the sums exact, so equality is meaningful
        (0u64..1000, 0u64..1000, 0u64..1000, 0u32..1000, 0u32..1000).prop_map(|(b, r, s, f, w)| CostLedger {
            rollout_batches: b,
            rollouts: r,
            generated_steps: s,
            flop_proxy: f as f64,
            wall_seconds: w as f64,
        })
    }

    proptest! {
        #[test]
        fn merge_commutes_and_associates(a in arb_ledger(), b in arb_ledger(), c in arb_ledger()) {
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!((a + b) + c, a + (b + c));
        }
    }
}
