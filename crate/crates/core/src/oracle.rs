//! Exhaustive search over simulator decision sequences.
//!
//! Enumerates every schedule reachable through repeated legal dispatches and
//! returns the best makespan. Only feasible for instances with a handful of
//! operations; used as the reference optimum in tests and for the shipped
//! tiny upper-bound tables.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::sim::SimState;

/// Hard cap on instance size; beyond this the search space explodes.
pub const MAX_ORACLE_OPS: usize = 12;

/// Optimal makespan over all non-delay dispatch sequences.
pub fn optimal_makespan(instance: &Arc<Instance>) -> Result<u64> {
    if instance.num_ops() > MAX_ORACLE_OPS {
        return Err(Error::InvalidParameter(format!(
            "exhaustive search limited to {MAX_ORACLE_OPS} operations, instance has {}",
            instance.num_ops()
        )));
    }
    let state = SimState::initial(Arc::clone(instance));
    let mut best = u64::MAX;
    search(&state, &mut best);
    Ok(best)
}

fn search(state: &SimState, best: &mut u64) {
    if state.partial_makespan() >= *best {
        return; // partial makespan never decreases
    }
    if state.is_terminal() {
        *best = state.partial_makespan();
        return;
    }
    for action in state.legal_actions() {
        let mut next = state.clone();
        next.step(action).expect("legal action failed");
        search(&next, best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::tiny1;
    use crate::instance::{generate_fjsp, Instance, Job, Operation};

    #[test]
    fn tiny1_optimum_is_eight() {
        // Frozen from a run of this enumerator over all decision sequences.
        let inst = Arc::new(tiny1());
        assert_eq!(optimal_makespan(&inst).unwrap(), 8);
    }

    #[test]
    fn single_machine_optimum_is_total_time() {
        let inst = Arc::new(
            Instance::new(
                1,
                vec![
                    Job {
                        operations: vec![Operation::new(vec![(0, 4)])],
                    },
                    Job {
                        operations: vec![Operation::new(vec![(0, 9)])],
                    },
                ],
            )
            .unwrap(),
        );
        assert_eq!(optimal_makespan(&inst).unwrap(), 13);
    }

    #[test]
    fn oversized_instances_are_rejected() {
        let inst = Arc::new(generate_fjsp(10, 5, 1).unwrap());
        assert!(optimal_makespan(&inst).is_err());
    }
}
