//! Offline transition datasets: building from behavior policies, solution
//! dedup, normalization, on-disk storage, coverage analysis and sampling.
//!
//! On disk a dataset is a directory holding `manifest.json` (recipe echo,
//! counts, dedup report, normalization statistics), `trajectories.jsonl` and
//! `transitions.jsonl`. Features are stored raw; normalization applies at
//! load/training time so subsets can be re-normalized.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureFrame, NormStats};
use crate::heuristics::{all_pdr_specs, ga_solve, GaConfig, PdrPolicy, RandomPolicy};
use crate::instance::Instance;
use crate::seeding::derive_seed;
use crate::sim::{rollout, rollout_observed, Action, Policy, ScheduleTrace, SimState};

/// One offline training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub instance_id: u32,
    pub trajectory_id: u32,
    pub step: u32,
    /// Canonical fingerprint of the state (partial schedule + clock).
    pub state_key: u64,
    pub action: Action,
    /// Index of `action` in the state's legal-action list.
    pub action_index: u32,
    /// Negative makespan increase, in time units.
    pub reward: i64,
    pub terminal: bool,
    pub frame: FeatureFrame,
    /// `None` exactly on terminal transitions.
    pub next_frame: Option<FeatureFrame>,
}

/// Per-trajectory metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub trajectory_id: u32,
    pub instance_id: u32,
    /// Behavior policy that produced the solution, e.g. `pdr:MWR-SPT`.
    pub source: String,
    pub makespan: u64,
    pub num_steps: u32,
}

/// Which behavior policies generate the solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    /// All dispatching rules, one solution each (16 flexible / 4 job-shop).
    Pdr,
    /// The genetic algorithm's entire final population.
    Ga,
    /// Union of the two above.
    PdrGa,
    /// Uniform random rollouts.
    Random,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Pdr => "pdr",
            Recipe::Ga => "ga",
            Recipe::PdrGa => "pdr-ga",
            Recipe::Random => "random",
        }
    }
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pdr" => Ok(Recipe::Pdr),
            "ga" => Ok(Recipe::Ga),
            "pdr-ga" | "pdrga" => Ok(Recipe::PdrGa),
            "random" => Ok(Recipe::Random),
            other => Err(Error::InvalidParameter(format!("unknown recipe `{other}`"))),
        }
    }
}

/// Dataset build settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    pub recipe: Recipe,
    /// Rollouts per instance for the random recipe.
    pub random_rollouts: usize,
    /// GA settings for the GA-backed recipes (population size is the
    /// per-instance solution count).
    pub ga: GaConfig,
    pub seed: u64,
}

impl BuildConfig {
    pub fn new(recipe: Recipe, seed: u64) -> BuildConfig {
        BuildConfig {
            recipe,
            random_rollouts: 100,
            ga: GaConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    /// Solutions generated before duplicate removal.
    pub generated: usize,
    /// Solutions surviving duplicate removal.
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub recipe: String,
    pub seed: u64,
    pub num_instances: usize,
    /// Solutions attempted per instance, before dedup.
    pub solutions_per_instance: usize,
    pub dedup: DedupReport,
    pub num_trajectories: usize,
    pub num_transitions: usize,
    pub norm: NormStats,
}

/// An in-memory offline dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<TrajectoryMeta>,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Mean makespan over trajectories.
    pub fn mean_trajectory_makespan(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.makespan as f64).sum::<f64>()
            / self.trajectories.len() as f64
    }
}

/// Replays a recorded trace as a policy, matching each legal set against the
/// next trace step. Panics in `choose` are converted to contract errors by
/// the caller validating traces first.
struct TracePolicy<'a> {
    steps: &'a [crate::sim::TraceStep],
    cursor: usize,
}

impl Policy for TracePolicy<'_> {
    fn choose(&mut self, _state: &SimState, legal: &[Action]) -> usize {
        let step = &self.steps[self.cursor];
        self.cursor += 1;
        legal
            .iter()
            .position(|a| a.job == step.job && a.pos == step.pos && a.machine == step.machine)
            .expect("trace action not legal during replay")
    }
}

/// Replays a trace through the simulator, recording one [`Transition`] per
/// step. The trace must have been produced by a simulator rollout on the same
/// instance.
pub fn trace_to_transitions(
    instance: &Arc<Instance>,
    trace: &ScheduleTrace,
    instance_id: u32,
    trajectory_id: u32,
) -> Result<Vec<Transition>> {
    let mut policy = TracePolicy {
        steps: &trace.steps,
        cursor: 0,
    };
    let mut out = Vec::with_capacity(trace.steps.len());
    let mut step = 0u32;
    rollout_observed(instance, &mut policy, |before, legal, index, reward, after| {
        let frame = features::extract(before).expect("non-terminal state");
        let next_frame = if after.is_terminal() {
            None
        } else {
            Some(features::extract(after).expect("non-terminal state"))
        };
        out.push(Transition {
            instance_id,
            trajectory_id,
            step,
            state_key: before.canonical_key(),
            action: legal[index],
            action_index: index as u32,
            reward,
            terminal: after.is_terminal(),
            frame,
            next_frame,
        });
        step += 1;
    })?;
    Ok(out)
}

/// Solutions for one instance, before global id assignment.
struct InstanceSolutions {
    generated: usize,
    traces: Vec<(String, ScheduleTrace)>,
}

fn generate_solutions(
    instance: &Arc<Instance>,
    instance_index: usize,
    cfg: &BuildConfig,
) -> Result<InstanceSolutions> {
    let mut traces: Vec<(String, ScheduleTrace)> = Vec::new();
    let with_pdr = matches!(cfg.recipe, Recipe::Pdr | Recipe::PdrGa);
    let with_ga = matches!(cfg.recipe, Recipe::Ga | Recipe::PdrGa);
    let with_random = matches!(cfg.recipe, Recipe::Random);

    if with_pdr {
        for spec in all_pdr_specs(instance.kind()) {
            let trace = rollout(instance, &mut PdrPolicy::new(spec))?;
            traces.push((format!("pdr:{}", spec.name()), trace));
        }
    }
    if with_ga {
        let ga_cfg = GaConfig {
            seed: derive_seed(cfg.seed, 1, instance_index as u64),
            ..cfg.ga.clone()
        };
        let result = ga_solve(instance, &ga_cfg)?;
        for trace in result.population {
            traces.push(("ga".to_string(), trace));
        }
    }
    if with_random {
        for r in 0..cfg.random_rollouts {
            let seed = derive_seed(cfg.seed, 2, (instance_index * cfg.random_rollouts + r) as u64);
            let trace = rollout(instance, &mut RandomPolicy::new(seed))?;
            traces.push((format!("random:{r}"), trace));
        }
    }

    // Duplicate solutions are removed per instance: two solutions are equal
    // iff their ordered (op, machine, start) sequences are identical.
    let generated = traces.len();
    let mut seen: HashSet<Vec<(usize, usize, usize, u64)>> = HashSet::new();
    let traces = traces
        .into_iter()
        .filter(|(_, trace)| {
            let key: Vec<_> = trace
                .steps
                .iter()
                .map(|s| (s.job, s.pos, s.machine, s.start))
                .collect();
            seen.insert(key)
        })
        .collect();

    Ok(InstanceSolutions { generated, traces })
}

/// Expected solutions per instance before dedup, for the manifest.
fn solutions_per_instance(instances: &[Arc<Instance>], cfg: &BuildConfig) -> usize {
    let pdr = instances
        .first()
        .map(|i| all_pdr_specs(i.kind()).len())
        .unwrap_or(0);
    match cfg.recipe {
        Recipe::Pdr => pdr,
        Recipe::Ga => cfg.ga.population_size,
        Recipe::PdrGa => pdr + cfg.ga.population_size,
        Recipe::Random => cfg.random_rollouts,
    }
}

/// Builds a dataset: rolls out the recipe's behavior policies on every
/// instance, removes duplicate solutions per instance, records every
/// transition of the survivors, then fits normalization statistics.
/// Instances fan out across worker threads; output is identical regardless
/// of thread count.
pub fn build_dataset(instances: &[Arc<Instance>], cfg: &BuildConfig) -> Result<Dataset> {
    if instances.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot build a dataset from an empty instance list".into(),
        ));
    }

    let per_instance: Vec<Result<InstanceSolutions>> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, instance)| generate_solutions(instance, idx, cfg))
        .collect();

    let mut trajectories = Vec::new();
    let mut generated_total = 0;
    let mut replay_jobs: Vec<(u32, u32, ScheduleTrace)> = Vec::new();
    for (idx, built) in per_instance.into_iter().enumerate() {
        let built = built?;
        generated_total += built.generated;
        for (source, trace) in built.traces {
            let trajectory_id = trajectories.len() as u32;
            trajectories.push(TrajectoryMeta {
                trajectory_id,
                instance_id: idx as u32,
                source,
                makespan: trace.makespan,
                num_steps: trace.steps.len() as u32,
            });
            replay_jobs.push((idx as u32, trajectory_id, trace));
        }
    }

    let per_trajectory: Vec<Result<Vec<Transition>>> = replay_jobs
        .par_iter()
        .map(|(instance_id, trajectory_id, trace)| {
            trace_to_transitions(
                &instances[*instance_id as usize],
                trace,
                *instance_id,
                *trajectory_id,
            )
        })
        .collect();
    let mut transitions = Vec::new();
    for batch in per_trajectory {
        transitions.extend(batch?);
    }

    let norm = features::fit_normalizer(transitions.iter().map(|t| &t.frame))?;
    let manifest = DatasetManifest {
        recipe: cfg.recipe.name().to_string(),
        seed: cfg.seed,
        num_instances: instances.len(),
        solutions_per_instance: solutions_per_instance(instances, cfg),
        dedup: DedupReport {
            generated: generated_total,
            kept: trajectories.len(),
        },
        num_trajectories: trajectories.len(),
        num_transitions: transitions.len(),
        norm,
    };
    Ok(Dataset {
        manifest,
        trajectories,
        transitions,
    })
}

/// Axis along which [`subset`] samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetAxis {
    /// Keep a subsample of the instances (with all their solutions).
    Instances,
    /// Keep a subsample of each instance's solutions.
    Solutions,
}

/// Uniform subsample along an axis by fraction of the current count;
/// normalization statistics are refit on the survivors.
pub fn subset(ds: &Dataset, axis: SubsetAxis, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subset fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let count_for = |n: usize| ((fraction * n as f64).round() as usize).clamp(1, n);
    match axis {
        SubsetAxis::Instances => {
            let mut ids: Vec<u32> = ds.trajectories.iter().map(|t| t.instance_id).collect();
            ids.sort_unstable();
            ids.dedup();
            subset_instances(ds, count_for(ids.len()), seed)
        }
        SubsetAxis::Solutions => subset_solutions(ds, count_for, seed),
    }
}

/// Keeps exactly `count` instances, sampled uniformly without replacement.
pub fn subset_instances(ds: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let mut ids: Vec<u32> = ds.trajectories.iter().map(|t| t.instance_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if count == 0 || count > ids.len() {
        return Err(Error::InvalidParameter(format!(
            "instance subset count {count} out of range (1..={})",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let keep: HashSet<u32> = ids.into_iter().take(count).collect();
    let keep_traj: HashSet<u32> = ds
        .trajectories
        .iter()
        .filter(|t| keep.contains(&t.instance_id))
        .map(|t| t.trajectory_id)
        .collect();
    rebuild_filtered(ds, &keep_traj)
}

fn subset_solutions(
    ds: &Dataset,
    count_for: impl Fn(usize) -> usize,
    seed: u64,
) -> Result<Dataset> {
    let mut by_instance: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for t in &ds.trajectories {
        by_instance.entry(t.instance_id).or_default().push(t.trajectory_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep_traj = HashSet::new();
    for (_, mut ids) in by_instance {
        let take = count_for(ids.len());
        ids.shuffle(&mut rng);
        keep_traj.extend(ids.into_iter().take(take));
    }
    rebuild_filtered(ds, &keep_traj)
}

fn rebuild_filtered(ds: &Dataset, keep_traj: &HashSet<u32>) -> Result<Dataset> {
    let trajectories: Vec<TrajectoryMeta> = ds
        .trajectories
        .iter()
        .filter(|t| keep_traj.contains(&t.trajectory_id))
        .cloned()
        .collect();
    let transitions: Vec<Transition> = ds
        .transitions
        .iter()
        .filter(|t| keep_traj.contains(&t.trajectory_id))
        .cloned()
        .collect();
    if transitions.is_empty() {
        return Err(Error::InvalidParameter("subset selected no data".into()));
    }
    let norm = features::fit_normalizer(transitions.iter().map(|t| &t.frame))?;
    let mut instance_ids: Vec<u32> = trajectories.iter().map(|t| t.instance_id).collect();
    instance_ids.sort_unstable();
    instance_ids.dedup();
    let manifest = DatasetManifest {
        recipe: ds.manifest.recipe.clone(),
        seed: ds.manifest.seed,
        num_instances: instance_ids.len(),
        solutions_per_instance: ds.manifest.solutions_per_instance,
        dedup: ds.manifest.dedup.clone(),
        num_trajectories: trajectories.len(),
        num_transitions: transitions.len(),
        norm,
    };
    Ok(Dataset {
        manifest,
        trajectories,
        transitions,
    })
}

/// Unique `(state, action)` pair count.
pub fn unique_state_actions(ds: &Dataset) -> usize {
    let set: HashSet<(u64, usize, usize, usize)> = ds
        .transitions
        .iter()
        .map(|t| (t.state_key, t.action.job, t.action.pos, t.action.machine))
        .collect();
    set.len()
}

/// State-action coverage of `target` relative to `reference`: the ratio of
/// unique (state, action) pair counts.
pub fn saco(target: &Dataset, reference: &Dataset) -> Result<f64> {
    let denom = unique_state_actions(reference);
    if denom == 0 {
        return Err(Error::InvalidParameter(
            "reference dataset has no state-action pairs".into(),
        ));
    }
    Ok(unique_state_actions(target) as f64 / denom as f64)
}

/// Per-instance normalized makespans: each trajectory's makespan divided by
/// the instance's best makespan in the dataset (so 1.0 is the in-dataset best).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDistribution {
    pub instance_id: u32,
    pub normalized: Vec<f64>,
}

pub fn makespan_histogram(ds: &Dataset) -> Vec<InstanceDistribution> {
    let mut by_instance: std::collections::BTreeMap<u32, Vec<u64>> = Default::default();
    for t in &ds.trajectories {
        by_instance.entry(t.instance_id).or_default().push(t.makespan);
    }
    by_instance
        .into_iter()
        .map(|(instance_id, makespans)| {
            let best = *makespans.iter().min().unwrap() as f64;
            InstanceDistribution {
                instance_id,
                normalized: makespans.iter().map(|&m| m as f64 / best).collect(),
            }
        })
        .collect()
}

/// Equal-width bins over `[1, max]`; returns `(lo, hi, count)` per bin.
pub fn histogram_bins(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    assert!(bins > 0);
    let max = values.iter().copied().fold(1.0f64, f64::max);
    let width = ((max - 1.0) / bins as f64).max(f64::EPSILON);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut b = ((v - 1.0) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (1.0 + i as f64 * width, 1.0 + (i + 1) as f64 * width, c))
        .collect()
}

/// Interquartile range of a sample (linear interpolation between order
/// statistics).
pub fn iqr(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    q(0.75) - q(0.25)
}

/// Uniform sample of transition indices, with replacement.
pub fn sample_batch(ds: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::InvalidParameter("dataset is empty".into()));
    }
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::InvalidParameter(format!(
            "batch size {batch_size} out of range (1..={})",
            ds.len()
        )));
    }
    Ok((0..batch_size).map(|_| rng.gen_range(0..ds.len())).collect())
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const TRANSITIONS_FILE: &str = "transitions.jsonl";

/// Writes `manifest.json`, `trajectories.jsonl` and `transitions.jsonl`.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&ds.manifest)?,
    )?;
    let mut lines = String::new();
    for t in &ds.trajectories {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    std::fs::write(dir.join(TRAJECTORIES_FILE), lines)?;
    let mut lines = String::new();
    for t in &ds.transitions {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    std::fs::write(dir.join(TRANSITIONS_FILE), lines)?;
    Ok(())
}

/// Loads a dataset directory, validating the manifest counts.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut trajectories = Vec::new();
    for line in std::fs::read_to_string(dir.join(TRAJECTORIES_FILE))?.lines() {
        if !line.trim().is_empty() {
            trajectories.push(serde_json::from_str(line)?);
        }
    }
    let mut transitions = Vec::new();
    for line in std::fs::read_to_string(dir.join(TRANSITIONS_FILE))?.lines() {
        if !line.trim().is_empty() {
            transitions.push(serde_json::from_str(line)?);
        }
    }
    if trajectories.len() != manifest.num_trajectories
        || transitions.len() != manifest.num_transitions
    {
        return Err(Error::Contract(format!(
            "manifest counts ({}, {}) do not match stored records ({}, {})",
            manifest.num_trajectories,
            manifest.num_transitions,
            trajectories.len(),
            transitions.len()
        )));
    }
    Ok(Dataset {
        manifest,
        trajectories,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_fjsp, generate_jsp, Instance, Job, Operation};

    fn tiny_instances(n: usize, base_seed: u64) -> Vec<Arc<Instance>> {
        (0..n)
            .map(|i| Arc::new(generate_fjsp(3, 2, base_seed + i as u64).unwrap()))
            .collect()
    }

    fn small_ga() -> GaConfig {
        GaConfig {
            population_size: 10,
            generations: 5,
            ..GaConfig::default()
        }
    }

    #[test]
    fn pdr_recipe_cardinality_and_reward_sums() {
        let instances = tiny_instances(3, 900);
        let cfg = BuildConfig::new(Recipe::Pdr, 1);
        let ds = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(ds.manifest.solutions_per_instance, 16);
        assert_eq!(ds.manifest.dedup.generated, 16 * 3);
        assert!(ds.manifest.dedup.kept <= 48);

        // Every reward is non-positive; per-trajectory sums telescope to the
        // negative makespan.
        for meta in &ds.trajectories {
            let sum: i64 = ds
                .transitions
                .iter()
                .filter(|t| t.trajectory_id == meta.trajectory_id)
                .map(|t| t.reward)
                .sum();
            assert_eq!(sum, -(meta.makespan as i64));
        }
        assert!(ds.transitions.iter().all(|t| t.reward <= 0));
        assert!(ds
            .transitions
            .iter()
            .all(|t| (t.action_index as usize) < t.frame.pairs.len()));
    }

    #[test]
    fn jsp_uses_four_rules() {
        let instances = vec![Arc::new(generate_jsp(3, 2, 4).unwrap())];
        let cfg = BuildConfig::new(Recipe::Pdr, 1);
        let ds = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(ds.manifest.solutions_per_instance, 4);
        assert_eq!(ds.manifest.dedup.generated, 4);
    }

    #[test]
    fn random_recipe_respects_rollout_count() {
        let instances = tiny_instances(2, 910);
        let mut cfg = BuildConfig::new(Recipe::Random, 7);
        cfg.random_rollouts = 12;
        let ds = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(ds.manifest.dedup.generated, 24);
        assert!(ds.manifest.dedup.kept <= 24);
    }

    #[test]
    fn ga_recipe_uses_final_population() {
        let instances = tiny_instances(1, 920);
        let mut cfg = BuildConfig::new(Recipe::Ga, 3);
        cfg.ga = small_ga();
        let ds = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(ds.manifest.solutions_per_instance, 10);
        assert_eq!(ds.manifest.dedup.generated, 10);
    }

    #[test]
    fn degenerate_instance_dedups_to_one_solution() {
        // One job, one machine: every dispatching rule builds the same
        // schedule, so 16 generated solutions collapse to 1.
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
        let cfg = BuildConfig::new(Recipe::Pdr, 1);
        let ds = build_dataset(&[inst], &cfg).unwrap();
        assert_eq!(ds.manifest.dedup.kept, 1);
    }

    #[test]
    fn build_is_deterministic() {
        let instances = tiny_instances(2, 930);
        let mut cfg = BuildConfig::new(Recipe::PdrGa, 5);
        cfg.ga = small_ga();
        let a = build_dataset(&instances, &cfg).unwrap();
        let b = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn terminal_transitions_have_no_next_frame() {
        let instances = tiny_instances(1, 940);
        let cfg = BuildConfig::new(Recipe::Pdr, 1);
        let ds = build_dataset(&instances, &cfg).unwrap();
        for t in &ds.transitions {
            assert_eq!(t.terminal, t.next_frame.is_none());
        }
        assert!(ds.transitions.iter().any(|t| t.terminal));
    }

    #[test]
    fn disk_round_trip_is_bit_exact() {
        let instances = tiny_instances(2, 950);
        let mut cfg = BuildConfig::new(Recipe::Random, 2);
        cfg.random_rollouts = 5;
        let ds = build_dataset(&instances, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn subset_identity_and_determinism() {
        let instances = tiny_instances(4, 960);
        let mut cfg = BuildConfig::new(Recipe::Random, 2);
        cfg.random_rollouts = 6;
        let ds = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(subset(&ds, SubsetAxis::Instances, 1.0, 9).unwrap(), ds);
        let a = subset(&ds, SubsetAxis::Instances, 0.5, 9).unwrap();
        let b = subset(&ds, SubsetAxis::Instances, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest.num_instances, 2);

        let c = subset_instances(&ds, 3, 1).unwrap();
        assert_eq!(c.manifest.num_instances, 3);

        let d = subset(&ds, SubsetAxis::Solutions, 0.5, 4).unwrap();
        assert_eq!(d.manifest.num_instances, 4);
        assert!(d.manifest.num_trajectories < ds.manifest.num_trajectories);
        // Normalization statistics were refit on the survivors.
        assert_eq!(
            d.manifest.norm,
            features::fit_normalizer(d.transitions.iter().map(|t| &t.frame)).unwrap()
        );
    }

    #[test]
    fn saco_is_one_against_itself_and_at_most_one_for_subsets() {
        let instances = tiny_instances(3, 970);
        let mut cfg = BuildConfig::new(Recipe::Random, 2);
        cfg.random_rollouts = 8;
        let ds = build_dataset(&instances, &cfg).unwrap();
        assert_eq!(saco(&ds, &ds).unwrap(), 1.0);
        let sub = subset(&ds, SubsetAxis::Solutions, 0.5, 3).unwrap();
        assert!(saco(&sub, &ds).unwrap() <= 1.0);
    }

    #[test]
    fn random_covers_more_than_pdr_on_tiny_instances() {
        let instances = tiny_instances(5, 980);
        let pdr = build_dataset(&instances, &BuildConfig::new(Recipe::Pdr, 1)).unwrap();
        let mut cfg = BuildConfig::new(Recipe::Random, 1);
        cfg.random_rollouts = 50;
        let random = build_dataset(&instances, &cfg).unwrap();
        assert!(saco(&random, &pdr).unwrap() > 1.0);
    }

    #[test]
    fn histogram_of_single_trajectory_sits_at_one() {
        let instances = tiny_instances(1, 990);
        let mut cfg = BuildConfig::new(Recipe::Random, 2);
        cfg.random_rollouts = 1;
        let ds = build_dataset(&instances, &cfg).unwrap();
        let dists = makespan_histogram(&ds);
        assert_eq!(dists.len(), 1);
        assert_eq!(dists[0].normalized, vec![1.0]);
        let bins = histogram_bins(&dists[0].normalized, 4);
        let total: usize = bins.iter().map(|&(_, _, c)| c).sum();
        assert_eq!(total, 1);
    }

    #[test]
    fn histogram_bin_counts_sum_to_trajectory_count() {
        let instances = tiny_instances(2, 995);
        let mut cfg = BuildConfig::new(Recipe::Random, 3);
        cfg.random_rollouts = 10;
        let ds = build_dataset(&instances, &cfg).unwrap();
        let dists = makespan_histogram(&ds);
        let all: Vec<f64> = dists.iter().flat_map(|d| d.normalized.clone()).collect();
        let bins = histogram_bins(&all, 8);
        let total: usize = bins.iter().map(|&(_, _, c)| c).sum();
        assert_eq!(total, ds.manifest.num_trajectories);
    }

    #[test]
    fn batch_sampling_is_seeded_and_bounded() {
        let instances = tiny_instances(1, 997);
        let cfg = BuildConfig::new(Recipe::Pdr, 1);
        let ds = build_dataset(&instances, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = sample_batch(&ds, ds.len(), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_batch(&ds, ds.len(), &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i < ds.len()));
        assert!(sample_batch(&ds, 0, &mut rng).is_err());
        assert!(sample_batch(&ds, ds.len() + 1, &mut rng).is_err());
    }

    #[test]
    fn empty_instance_list_is_rejected() {
        let cfg = BuildConfig::new(Recipe::Pdr, 1);
        assert!(build_dataset(&[], &cfg).is_err());
    }
}
