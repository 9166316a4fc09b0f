//! Inference and benchmarking: greedy and best-of-k sampling rollouts of a
//! trained bundle, optimality gaps against best-known makespans, and
//! report assembly over instance sets.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::features::{apply_normalizer, extract};
use crate::heuristics::{ga_solve, GaConfig, PdrPolicy, PdrSpec, RandomPolicy};
use crate::instance::Instance;
use crate::nets::{actor_forward, encode, BoundParams};
use crate::seeding::derive_seed;
use crate::sim::{rollout, Action, Policy, ScheduleTrace, SimState};
use crate::trainer::PolicyBundle;

/// Best-known makespans per instance id, used as gap denominators.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UbTable(pub BTreeMap<String, u64>);

impl UbTable {
    /// Parses whitespace-separated `instance_id makespan` lines; `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<UbTable> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            let id = toks
                .next()
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "expected instance id".into(),
                })?
                .to_string();
            let value: u64 = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "expected integer makespan".into(),
                })?;
            if value == 0 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "best-known makespan must be positive".into(),
                });
            }
            map.insert(id, value);
        }
        Ok(UbTable(map))
    }

    pub fn load(path: &Path) -> Result<UbTable> {
        UbTable::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.0 {
            out.push_str(&format!("{id} {v}\n"));
        }
        out
    }

    pub fn get(&self, id: &str) -> Option<u64> {
        self.0.get(id).copied()
    }
}

/// Optimality gap in percent: `(c_max - c_ub) / c_ub * 100`. Negative when
/// the schedule beats the best-known makespan.
pub fn gap(c_max: u64, c_ub: u64) -> Result<f64> {
    if c_ub == 0 {
        return Err(Error::InvalidParameter(
            "best-known makespan must be positive".into(),
        ));
    }
    Ok((c_max as f64 - c_ub as f64) / c_ub as f64 * 100.0)
}

/// The trained policy as a simulator [`Policy`]: encode the state, run the
/// actor head, then pick the argmax (greedy) or sample (stochastic).
pub struct BundlePolicy<'a> {
    bundle: &'a PolicyBundle,
    rng: Option<ChaCha8Rng>,
}

impl<'a> BundlePolicy<'a> {
    pub fn greedy(bundle: &'a PolicyBundle) -> Self {
        BundlePolicy { bundle, rng: None }
    }

    pub fn sampling(bundle: &'a PolicyBundle, seed: u64) -> Self {
        BundlePolicy {
            bundle,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn action_probs(&self, state: &SimState) -> Vec<f64> {
        let frame = extract(state).expect("non-terminal state");
        let frame = apply_normalizer(&frame, &self.bundle.norm);
        let mut g = Graph::new();
        let mut theta = BoundParams::frozen(&self.bundle.theta);
        let enc = encode(&mut g, &mut theta, &self.bundle.net, &frame);
        let mut psi = BoundParams::frozen(&self.bundle.psi);
        let probs = actor_forward(&mut g, &mut psi, &self.bundle.net, &enc);
        g.value(probs).data.clone()
    }
}

impl Policy for BundlePolicy<'_> {
    fn choose(&mut self, state: &SimState, legal: &[Action]) -> usize {
        let probs = self.action_probs(state);
        debug_assert_eq!(probs.len(), legal.len());
        match &mut self.rng {
            None => {
                // Argmax; ties resolve to the lowest action index.
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best
            }
            Some(rng) => {
                let draw: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        return i;
                    }
                }
                probs.len() - 1
            }
        }
    }
}

/// Deterministic argmax rollout. Returns the trace and the pure
/// policy-plus-simulator wall time.
pub fn rollout_greedy(
    bundle: &PolicyBundle,
    instance: &Arc<Instance>,
) -> Result<(ScheduleTrace, f64)> {
    let start = Instant::now();
    let mut policy = BundlePolicy::greedy(bundle);
    let trace = rollout(instance, &mut policy)?;
    Ok((trace, start.elapsed().as_secs_f64()))
}

/// Best-of-k sampling outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingOutcome {
    /// Best makespan of each repeat.
    pub per_repeat_best: Vec<u64>,
    /// Mean of the per-repeat bests (the reported metric).
    pub mean_best: f64,
    pub wall_s: f64,
}

/// Draws `k` stochastic rollouts per repeat, takes each repeat's best
/// makespan, and reports the mean over repeats.
pub fn rollout_sampling(
    bundle: &PolicyBundle,
    instance: &Arc<Instance>,
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<SamplingOutcome> {
    if k == 0 || repeats == 0 {
        return Err(Error::InvalidParameter(
            "sampling needs k >= 1 and repeats >= 1".into(),
        ));
    }
    let start = Instant::now();
    let mut per_repeat_best = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut best = u64::MAX;
        for i in 0..k {
            let run_seed = derive_seed(seed, rep as u64, i as u64);
            let mut policy = BundlePolicy::sampling(bundle, run_seed);
            let trace = rollout(instance, &mut policy)?;
            best = best.min(trace.makespan);
        }
        per_repeat_best.push(best);
    }
    let mean_best =
        per_repeat_best.iter().map(|&b| b as f64).sum::<f64>() / repeats as f64;
    Ok(SamplingOutcome {
        per_repeat_best,
        mean_best,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Evaluation mode for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    Greedy,
    Sampling { k: usize, repeats: usize },
}

/// The solver evaluated by a sweep: the trained bundle or a reference
/// heuristic column.
pub enum Method<'a> {
    Bundle(&'a PolicyBundle),
    Pdr(PdrSpec),
    Ga(GaConfig),
    Random,
}

impl Method<'_> {
    pub fn label(&self) -> String {
        match self {
            Method::Bundle(_) => "policy".to_string(),
            Method::Pdr(spec) => format!("pdr:{}", spec.name()),
            Method::Ga(_) => "ga".to_string(),
            Method::Random => "random".to_string(),
        }
    }
}

/// One instance's evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance: String,
    pub makespan: f64,
    /// `None` when no best-known makespan is available.
    pub gap_percent: Option<f64>,
    pub wall_s: f64,
}

/// Aggregated sweep result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: EvalMode,
    pub rows: Vec<EvalRow>,
    pub mean_gap: Option<f64>,
    pub std_gap: Option<f64>,
    pub mean_wall_s: f64,
}

impl EvalReport {
    /// Recomputes the aggregates from the rows (used by invariant tests).
    pub fn recompute_aggregates(rows: &[EvalRow]) -> (Option<f64>, Option<f64>, f64) {
        let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap_percent).collect();
        let mean_wall = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.wall_s).sum::<f64>() / rows.len() as f64
        };
        if gaps.is_empty() {
            return (None, None, mean_wall);
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
        (Some(mean), Some(var.sqrt()), mean_wall)
    }
}

fn evaluate_one(
    method: &Method,
    id: &str,
    instance: &Arc<Instance>,
    mode: EvalMode,
    ub: &UbTable,
    seed: u64,
) -> Result<EvalRow> {
    let (makespan, wall_s) = match (method, mode) {
        (Method::Bundle(bundle), EvalMode::Greedy) => {
            let (trace, wall) = rollout_greedy(bundle, instance)?;
            (trace.makespan as f64, wall)
        }
        (Method::Bundle(bundle), EvalMode::Sampling { k, repeats }) => {
            let out = rollout_sampling(bundle, instance, k, repeats, seed)?;
            (out.mean_best, out.wall_s)
        }
        (Method::Pdr(spec), _) => {
            let start = Instant::now();
            let trace = rollout(instance, &mut PdrPolicy::new(*spec))?;
            (trace.makespan as f64, start.elapsed().as_secs_f64())
        }
        (Method::Ga(cfg), _) => {
            let start = Instant::now();
            let cfg = GaConfig {
                seed: derive_seed(seed, 17, 0),
                ..cfg.clone()
            };
            let result = ga_solve(instance, &cfg)?;
            (result.best.makespan as f64, start.elapsed().as_secs_f64())
        }
        (Method::Random, _) => {
            let start = Instant::now();
            let trace = rollout(instance, &mut RandomPolicy::new(seed))?;
            (trace.makespan as f64, start.elapsed().as_secs_f64())
        }
    };
    let gap_percent = ub
        .get(id)
        .map(|c_ub| (makespan - c_ub as f64) / c_ub as f64 * 100.0);
    Ok(EvalRow {
        instance: id.to_string(),
        makespan,
        gap_percent,
        wall_s,
    })
}

/// Evaluates a method over a set of named instances. Instances run in
/// parallel; row order follows the input order, so reports are reproducible.
pub fn benchmark_sweep(
    method: &Method,
    instances: &[(String, Arc<Instance>)],
    ub: &UbTable,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::InvalidParameter("no instances to evaluate".into()));
    }
    let rows: Vec<Result<EvalRow>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, (id, instance))| {
            evaluate_one(method, id, instance, mode, ub, derive_seed(seed, 23, i as u64))
        })
        .collect();
    let rows: Vec<EvalRow> = rows.into_iter().collect::<Result<_>>()?;
    let (mean_gap, std_gap, mean_wall_s) = EvalReport::recompute_aggregates(&rows);
    Ok(EvalReport {
        method: method.label(),
        mode,
        rows,
        mean_gap,
        std_gap,
        mean_wall_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, BuildConfig, Recipe};
    use crate::fixtures::tiny1;
    use crate::instance::{generate_fjsp, Instance, Job, Operation};
    use crate::nets::NetConfig;
    use crate::oracle::optimal_makespan;
    use crate::sim::validate;
    use crate::trainer::{train, TrainConfig};

    fn quick_bundle(seed: u64) -> PolicyBundle {
        let instances: Vec<Arc<Instance>> = (0..2)
            .map(|i| Arc::new(generate_fjsp(3, 2, 700 + seed + i).unwrap()))
            .collect();
        let mut bcfg = BuildConfig::new(Recipe::Random, seed);
        bcfg.random_rollouts = 4;
        let ds = build_dataset(&instances, &bcfg).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            seed,
            net: NetConfig {
                dan_dims: vec![6, 4],
                heads: 2,
                critic_hidden: 8,
                critic_layers: 2,
                actor_hidden: 8,
                actor_layers: 2,
                num_quantiles: 4,
                dueling: true,
                leaky_slope: 0.01,
            },
            ..TrainConfig::default()
        };
        train(&ds, &cfg).unwrap().0
    }

    #[test]
    fn gap_arithmetic() {
        assert_eq!(gap(66, 60).unwrap(), 10.0);
        assert_eq!(gap(60, 60).unwrap(), 0.0);
        // Beating the best-known makespan yields a negative gap.
        assert!(gap(59, 60).unwrap() < 0.0);
        assert!(gap(10, 0).is_err());
    }

    #[test]
    fn greedy_rollouts_are_deterministic_and_valid() {
        let bundle = quick_bundle(1);
        let inst = Arc::new(tiny1());
        let (t1, _) = rollout_greedy(&bundle, &inst).unwrap();
        let (t2, _) = rollout_greedy(&bundle, &inst).unwrap();
        assert_eq!(t1, t2);
        assert!(validate(&t1, &inst).is_empty());
        assert!(t1.makespan >= optimal_makespan(&inst).unwrap());
    }

    #[test]
    fn single_machine_makespan_is_policy_independent() {
        let inst = Arc::new(
            Instance::new(
                1,
                vec![
                    Job { operations: vec![Operation::new(vec![(0, 3)])] },
                    Job { operations: vec![Operation::new(vec![(0, 9)])] },
                ],
            )
            .unwrap(),
        );
        let bundle = quick_bundle(2);
        let (trace, _) = rollout_greedy(&bundle, &inst).unwrap();
        assert_eq!(trace.makespan, 12);
    }

    #[test]
    fn sampling_is_seeded_and_bounded_by_the_oracle() {
        let bundle = quick_bundle(3);
        let inst = Arc::new(tiny1());
        let a = rollout_sampling(&bundle, &inst, 8, 2, 5).unwrap();
        let b = rollout_sampling(&bundle, &inst, 8, 2, 5).unwrap();
        assert_eq!(a.per_repeat_best, b.per_repeat_best);
        assert_eq!(a.per_repeat_best.len(), 2);
        let optimum = optimal_makespan(&inst).unwrap();
        assert!(a.per_repeat_best.iter().all(|&m| m >= optimum));
    }

    #[test]
    fn forced_chain_sampling_equals_greedy() {
        // Every state of a single-machine chain has exactly one legal action,
        // so the actor distribution is a point mass and best-of-1 sampling
        // reproduces the greedy rollout.
        let inst = Arc::new(
            Instance::new(
                1,
                vec![Job {
                    operations: vec![
                        Operation::new(vec![(0, 3)]),
                        Operation::new(vec![(0, 4)]),
                    ],
                }],
            )
            .unwrap(),
        );
        let bundle = quick_bundle(6);
        let (greedy, _) = rollout_greedy(&bundle, &inst).unwrap();
        let sampled = rollout_sampling(&bundle, &inst, 1, 1, 9).unwrap();
        assert_eq!(sampled.mean_best, greedy.makespan as f64);
    }

    #[test]
    fn best_of_many_sampling_rarely_loses_to_greedy() {
        // Best-of-k sampling should match or beat the greedy rollout on at
        // least 90% of a 20-instance toy suite once k is large.
        let instances: Vec<Arc<Instance>> = (0..20)
            .map(|i| Arc::new(generate_fjsp(4, 2, 2000 + i).unwrap()))
            .collect();
        let mut bcfg = BuildConfig::new(Recipe::Random, 5);
        bcfg.random_rollouts = 20;
        let ds = build_dataset(&instances, &bcfg).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 32,
            lr_critic: 1e-3,
            lr_actor: 1e-4,
            seed: 3,
            net: NetConfig {
                dan_dims: vec![6, 4],
                heads: 2,
                critic_hidden: 8,
                critic_layers: 2,
                actor_hidden: 8,
                actor_layers: 2,
                num_quantiles: 8,
                dueling: true,
                leaky_slope: 0.01,
            },
            ..TrainConfig::default()
        };
        let (bundle, _) = train(&ds, &cfg).unwrap();
        let mut wins = 0;
        for inst in &instances {
            let (greedy, _) = rollout_greedy(&bundle, inst).unwrap();
            let sampled = rollout_sampling(&bundle, inst, 100, 1, 11).unwrap();
            if sampled.per_repeat_best[0] <= greedy.makespan {
                wins += 1;
            }
        }
        assert!(wins >= 18, "sampling beat greedy on only {wins}/20 instances");
    }

    #[test]
    fn sweep_reports_cover_every_instance_and_aggregate_consistently() {
        let bundle = quick_bundle(4);
        let instances: Vec<(String, Arc<Instance>)> = (0..3)
            .map(|i| {
                (
                    format!("gen{i}"),
                    Arc::new(generate_fjsp(3, 2, 800 + i).unwrap()),
                )
            })
            .collect();
        // Oracle-derived best-known table for two of the three instances.
        let mut ub = UbTable::default();
        for (id, inst) in instances.iter().take(2) {
            ub.0.insert(id.clone(), optimal_makespan(inst).unwrap());
        }
        let report = benchmark_sweep(
            &Method::Bundle(&bundle),
            &instances,
            &ub,
            EvalMode::Greedy,
            1,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 3);
        // Rows without a best-known value report no gap but keep the makespan.
        assert!(report.rows[2].gap_percent.is_none());
        assert!(report.rows[2].makespan > 0.0);
        // Heuristic gaps against the exact optimum are non-negative.
        for row in &report.rows[..2] {
            assert!(row.gap_percent.unwrap() >= 0.0);
        }
        let (mean, std, wall) = EvalReport::recompute_aggregates(&report.rows);
        assert_eq!(report.mean_gap, mean);
        assert_eq!(report.std_gap, std);
        assert_eq!(report.mean_wall_s, wall);
    }

    #[test]
    fn reference_pdr_column_is_reproducible() {
        let instances: Vec<(String, Arc<Instance>)> = (0..3)
            .map(|i| {
                (
                    format!("gen{i}"),
                    Arc::new(generate_fjsp(4, 2, 900 + i).unwrap()),
                )
            })
            .collect();
        let ub = UbTable::default();
        let method = Method::Pdr("MOR-SPT".parse().unwrap());
        let a = benchmark_sweep(&method, &instances, &ub, EvalMode::Greedy, 1).unwrap();
        let b = benchmark_sweep(&method, &instances, &ub, EvalMode::Greedy, 2).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.makespan, y.makespan);
        }
    }

    #[test]
    fn ub_table_round_trips() {
        let table = UbTable::parse("# comment\nta01 1231\nmk01 40\n").unwrap();
        assert_eq!(table.get("ta01"), Some(1231));
        assert_eq!(table.get("mk01"), Some(40));
        assert_eq!(table.get("nope"), None);
        let text = table.to_text();
        assert_eq!(UbTable::parse(&text).unwrap(), table);
        assert!(UbTable::parse("x 0\n").is_err());
    }
}
