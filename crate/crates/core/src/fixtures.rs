//! Small hand-written instances used in tests and documentation.

use crate::instance::{Instance, Job, Operation};

/// Two jobs on two machines, four operations total:
///
/// - J1: O11 {M1: 3, M2: 5}, O12 {M2: 4}
/// - J2: O21 {M1: 2},        O22 {M1: 3, M2: 1}
///
/// (written 1-based here; indices in code are 0-based).
pub fn tiny1() -> Instance {
    Instance::new(
        2,
        vec![
            Job {
                operations: vec![
                    Operation::new(vec![(0, 3), (1, 5)]),
                    Operation::new(vec![(1, 4)]),
                ],
            },
            Job {
                operations: vec![
                    Operation::new(vec![(0, 2)]),
                    Operation::new(vec![(0, 3), (1, 1)]),
                ],
            },
        ],
    )
    .expect("tiny1 is a valid instance")
}
