//! Randomized trace fuzzing: the executable form of the state-machine
//! induction argument.
//!
//! Each trace boots a fresh guest on the policy and feeds it a seeded
//! stream of mixed valid and hostile requests. After every step the
//! independent safety oracle must hold, and every denied step must leave
//! the state snapshot bit-identical. A fuzz run is deterministic in its
//! seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gen::{random_request, TraceNamer};
use crate::agent::{safety_oracle, UvmState, OPERATIONAL_FAILURE};
use crate::policy::ExecutionPolicy;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub traces: u32,
    pub steps_per_trace: u32,
    pub total_steps: u64,
    pub allows: u64,
    pub denies: u64,
    pub operational_failures: u64,
    pub internal_faults: u64,
    pub safety_violations: u64,
    pub atomicity_violations: u64,
}

impl FuzzReport {
    pub fn violations(&self) -> u64 {
        self.safety_violations + self.atomicity_violations + self.internal_faults
    }

    pub fn merge(&mut self, other: &FuzzReport) {
        self.traces += other.traces;
        self.total_steps += other.total_steps;
        self.allows += other.allows;
        self.denies += other.denies;
        self.operational_failures += other.operational_failures;
        self.internal_faults += other.internal_faults;
        self.safety_violations += other.safety_violations;
        self.atomicity_violations += other.atomicity_violations;
    }
}

/// Run `trace_count` traces of `steps_per_trace` steps against the policy.
pub fn fuzz_traces(
    policy: &ExecutionPolicy,
    steps_per_trace: u32,
    trace_count: u32,
    seed: u64,
) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport {
        seed,
        traces: trace_count,
        steps_per_trace,
        ..FuzzReport::default()
    };
    for _ in 0..trace_count {
        let mut state = UvmState::from_policy(policy.clone(), rng.gen());
        let mut namer = TraceNamer::default();
        // the state after step n is the state before step n+1, so one
        // snapshot per step suffices for the atomicity comparison
        let mut before = state.snapshot();
        for _ in 0..steps_per_trace {
            let request = random_request(&mut rng, policy, &state, &mut namer);
            let response = match state.handle_request(&request) {
                Ok(response) => response,
                Err(_) => {
                    report.internal_faults += 1;
                    break;
                }
            };
            report.total_steps += 1;
            let after = state.snapshot();
            if response.allowed {
                report.allows += 1;
            } else {
                if response.deny_reason.as_deref() == Some(OPERATIONAL_FAILURE) {
                    report.operational_failures += 1;
                } else {
                    report.denies += 1;
                }
                if after != before {
                    report.atomicity_violations += 1;
                }
            }
            before = after;
            if !safety_oracle(&state) {
                report.safety_violations += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::gen::gen_policy_from_seed;

    #[test]
    fn zero_traces_yield_an_empty_report() {
        let policy = ExecutionPolicy::empty();
        let report = fuzz_traces(&policy, 10, 0, 0);
        assert_eq!(report.total_steps, 0);
        assert_eq!(report.allows, 0);
        assert_eq!(report.denies, 0);
        assert_eq!(report.violations(), 0);
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        let policy = gen_policy_from_seed(3);
        let a = fuzz_traces(&policy, 20, 10, 99);
        let b = fuzz_traces(&policy, 20, 10, 99);
        assert_eq!(a, b);
        let c = fuzz_traces(&policy, 20, 10, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn short_run_is_violation_free_and_mixed() {
        let policy = gen_policy_from_seed(1);
        let report = fuzz_traces(&policy, 50, 20, 0);
        assert_eq!(report.violations(), 0, "{report:?}");
        assert_eq!(report.total_steps, 1000);
        assert!(report.allows > 0, "trace mix should include allows: {report:?}");
        assert!(report.denies > 0, "trace mix should include denies: {report:?}");
    }
}
