//! Property tests over randomly generated instances: format round-trips,
//! simulator soundness, reward telescoping, and feature-range invariants.

use std::sync::Arc;

use proptest::prelude::*;
use schedq::features::extract;
use schedq::heuristics::RandomPolicy;
use schedq::instance::{
    generate_fjsp, generate_jsp, parse_standard_fjsp, parse_taillard_jsp, serialize,
    serialize_taillard_jsp,
};
use schedq::sim::{rollout_observed, validate};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fjsp_serialize_parse_round_trip(n in 1usize..8, m in 1usize..6, seed in 0u64..10_000) {
        let inst = generate_fjsp(n, m, seed).unwrap();
        let text = serialize(&inst);
        let back = parse_standard_fjsp(&text).unwrap();
        prop_assert_eq!(&inst, &back);
        prop_assert_eq!(serialize(&back), text);
    }

    #[test]
    fn jsp_taillard_round_trip(n in 1usize..8, m in 1usize..6, seed in 0u64..10_000) {
        let inst = generate_jsp(n, m, seed).unwrap();
        let text = serialize_taillard_jsp(&inst).unwrap();
        let back = parse_taillard_jsp(&text).unwrap();
        prop_assert_eq!(&inst, &back);
        // The canonical flexible format also covers pure job-shop instances.
        let back2 = parse_standard_fjsp(&serialize(&inst)).unwrap();
        prop_assert_eq!(&inst, &back2);
    }

    #[test]
    fn generated_fjsp_respects_bounds(n in 1usize..8, m in 1usize..6, seed in 0u64..10_000) {
        let inst = generate_fjsp(n, m, seed).unwrap();
        let lo = ((0.8 * m as f64).floor() as usize).max(1);
        let hi = ((1.2 * m as f64).floor() as usize).max(lo);
        for job in inst.jobs() {
            prop_assert!((lo..=hi).contains(&job.operations.len()));
            for op in &job.operations {
                for &(_, p) in op.eligible() {
                    prop_assert!((1..=99).contains(&p));
                }
            }
        }
    }

    #[test]
    fn generated_jsp_rows_are_permutations(n in 1usize..8, m in 1usize..6, seed in 0u64..10_000) {
        let inst = generate_jsp(n, m, seed).unwrap();
        for job in inst.jobs() {
            let mut machines: Vec<usize> =
                job.operations.iter().map(|op| op.eligible()[0].0).collect();
            machines.sort_unstable();
            let expected: Vec<usize> = (0..m).collect();
            prop_assert_eq!(machines, expected);
        }
    }

    #[test]
    fn random_episodes_are_sound_and_telescope(
        n in 1usize..6,
        m in 1usize..5,
        seed in 0u64..10_000,
        policy_seed in 0u64..1_000,
    ) {
        let inst = Arc::new(generate_fjsp(n, m, seed).unwrap());
        let mut policy = RandomPolicy::new(policy_seed);
        let mut total_reward = 0i64;
        let mut steps = 0usize;
        let trace = rollout_observed(&inst, &mut policy, |state, legal, index, reward, _| {
            // Frames stay aligned with the legal set and finite.
            let frame = extract(state).unwrap();
            assert_eq!(frame.pairs.len(), legal.len());
            assert!(frame.is_finite());
            assert!(index < legal.len());
            total_reward += reward;
            steps += 1;
        })
        .unwrap();
        prop_assert_eq!(steps, inst.num_ops());
        prop_assert_eq!(total_reward, -(trace.makespan as i64));
        prop_assert!(validate(&trace, &inst).is_empty());
    }
}
