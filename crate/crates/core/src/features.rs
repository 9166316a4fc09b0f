//! Feature extraction: per-state operation, machine and machine-operation
//! pair feature matrices, plus z-score normalization statistics.
//!
//! Operation rows cover each incomplete job's front (next unscheduled)
//! operation; machine rows cover all machines; pair rows align one-to-one
//! with the state's legal actions, in legal-action order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{OpState, SimState};

pub const OP_FEATURES: usize = 10;
pub const MACHINE_FEATURES: usize = 8;
pub const PAIR_FEATURES: usize = 8;

/// One legal action's row references into the frame matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    /// Row into `op_feats` / `op_rows`.
    pub op_row: usize,
    /// Row into `mach_feats`; machine rows are identity-indexed.
    pub machine: usize,
}

/// Feature matrices for one decision state. Self-contained: everything the
/// encoder needs (including candidate eligibility for machine adjacency)
/// travels with the frame, so stored datasets can be trained on without the
/// originating instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    /// `(job, pos)` identity of each operation row.
    pub op_rows: Vec<(usize, usize)>,
    /// Eligible machines of each operation row (full sets, not just free ones).
    pub op_eligible: Vec<Vec<usize>>,
    pub op_feats: Vec<[f64; OP_FEATURES]>,
    pub mach_feats: Vec<[f64; MACHINE_FEATURES]>,
    pub pair_feats: Vec<[f64; PAIR_FEATURES]>,
    /// One entry per legal action, in legal-action order.
    pub pairs: Vec<PairRef>,
}

impl FeatureFrame {
    pub fn num_actions(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_machines(&self) -> usize {
        self.mach_feats.len()
    }

    /// True when every matrix entry is finite.
    pub fn is_finite(&self) -> bool {
        self.op_feats.iter().flatten().all(|v| v.is_finite())
            && self.mach_feats.iter().flatten().all(|v| v.is_finite())
            && self.pair_feats.iter().flatten().all(|v| v.is_finite())
    }
}

/// Estimated lower bound on the completion time of `(job, pos)`: actual end
/// for scheduled operations; otherwise the earliest feasible start (no
/// earlier than now and the predecessor's bound) plus the minimum processing
/// time over eligible machines, chained along the job.
fn completion_lower_bound(state: &SimState, job: usize, pos: usize) -> f64 {
    let mut bound = 0.0f64;
    for p in 0..=pos {
        bound = match state.op_state(job, p) {
            OpState::Scheduled { end, .. } => end as f64,
            OpState::Unscheduled => {
                let start = bound.max(state.now() as f64);
                start + state.instance().operation(job, p).min_time() as f64
            }
        };
    }
    bound
}

/// Time since `(job, pos)` became available; 0 while its predecessor is
/// unscheduled or still running.
fn op_waiting_time(state: &SimState, job: usize, pos: usize) -> f64 {
    match state.ready_at(job, pos) {
        Some(ready) if ready <= state.now() => (state.now() - ready) as f64,
        _ => 0.0,
    }
}

/// Time the machine has been idle; 0 while it is working.
fn machine_waiting_time(state: &SimState, machine: usize) -> f64 {
    let free_at = state.machine_free_at(machine);
    if free_at <= state.now() {
        (state.now() - free_at) as f64
    } else {
        0.0
    }
}

/// Extracts the feature frame of a non-terminal state.
pub fn extract(state: &SimState) -> Result<FeatureFrame> {
    if state.is_terminal() {
        return Err(Error::Contract(
            "cannot extract features of a terminal state".into(),
        ));
    }
    let instance = state.instance();
    let m = instance.num_machines();
    let now = state.now();

    // Candidate operation rows: each incomplete job's front operation.
    let mut op_rows = Vec::new();
    for job in 0..instance.num_jobs() {
        if let Some(pos) = state.job_front(job) {
            op_rows.push((job, pos));
        }
    }

    let op_eligible: Vec<Vec<usize>> = op_rows
        .iter()
        .map(|&(job, pos)| {
            instance
                .operation(job, pos)
                .eligible()
                .iter()
                .map(|&(machine, _)| machine)
                .collect()
        })
        .collect();

    // Global maximum processing time over every (operation, machine) pair.
    let global_max = instance.max_processing_time() as f64;

    let op_feats: Vec<[f64; OP_FEATURES]> = op_rows
        .iter()
        .map(|&(job, pos)| {
            let op = instance.operation(job, pos);
            let min_p = op.min_time() as f64;
            let max_p = op.max_time() as f64;
            let mean_p = op.mean_time();
            let front = state.job_front(job).unwrap();
            let remaining_ops = (instance.job(job).operations.len() - front) as f64;
            let remaining_work: f64 = instance.job(job).operations[front..]
                .iter()
                .map(|o| o.mean_time())
                .sum();
            let scheduled = state.op_state(job, pos).is_scheduled();
            let remaining_proc = match state.op_state(job, pos) {
                OpState::Scheduled { end, .. } if end > now => (end - now) as f64,
                _ => 0.0,
            };
            [
                min_p,
                mean_p,
                max_p - min_p,
                op.eligible().len() as f64 / m as f64,
                if scheduled { 1.0 } else { 0.0 },
                completion_lower_bound(state, job, pos),
                remaining_ops,
                remaining_work,
                op_waiting_time(state, job, pos),
                remaining_proc,
            ]
        })
        .collect();

    // Unscheduled compatible operations per machine (over the whole instance),
    // and the subset ready to start now.
    let mut mach_feats = Vec::with_capacity(m);
    for machine in 0..m {
        let mut min_p = f64::INFINITY;
        let mut sum_p = 0.0;
        let mut count = 0usize;
        for job in 0..instance.num_jobs() {
            let Some(front) = state.job_front(job) else {
                continue;
            };
            for op in instance.job(job).operations.iter().skip(front) {
                if let Some(p) = op.processing_time(machine) {
                    min_p = min_p.min(p as f64);
                    sum_p += p as f64;
                    count += 1;
                }
            }
        }
        let schedulable_now = op_rows
            .iter()
            .filter(|&&(job, pos)| {
                matches!(state.ready_at(job, pos), Some(r) if r <= now)
                    && instance.operation(job, pos).processing_time(machine).is_some()
            })
            .count() as f64;
        let free_at = state.machine_free_at(machine);
        let free_in = free_at.saturating_sub(now) as f64;
        let working = if free_at > now { 1.0 } else { 0.0 };
        mach_feats.push([
            if count == 0 { 0.0 } else { min_p },
            if count == 0 { 0.0 } else { sum_p / count as f64 },
            count as f64,
            schedulable_now,
            free_in,
            machine_waiting_time(state, machine),
            working,
            free_in, // time left on the current task; equals the release delta
        ]);
    }

    // Pair rows, one per legal action in order.
    let legal = state.legal_actions();
    let row_of: std::collections::HashMap<(usize, usize), usize> = op_rows
        .iter()
        .enumerate()
        .map(|(i, &key)| (key, i))
        .collect();

    // Per-machine maxima used by the ratio features.
    let mut max_unscheduled_on: Vec<f64> = vec![0.0; m];
    let mut max_schedulable_on: Vec<f64> = vec![0.0; m];
    for job in 0..instance.num_jobs() {
        let Some(front) = state.job_front(job) else {
            continue;
        };
        for (pos, op) in instance.job(job).operations.iter().enumerate().skip(front) {
            for &(machine, p) in op.eligible() {
                max_unscheduled_on[machine] = max_unscheduled_on[machine].max(p as f64);
                let ready_now =
                    pos == front && matches!(state.ready_at(job, pos), Some(r) if r <= now);
                if ready_now {
                    max_schedulable_on[machine] = max_schedulable_on[machine].max(p as f64);
                }
            }
        }
    }

    let mut pairs = Vec::with_capacity(legal.len());
    let mut pair_feats = Vec::with_capacity(legal.len());
    for action in &legal {
        let op = instance.operation(action.job, action.pos);
        let p = op.processing_time(action.machine).unwrap() as f64;
        let op_row = row_of[&(action.job, action.pos)];
        let job_workload: f64 = instance
            .job(action.job)
            .operations
            .iter()
            .map(|o| o.mean_time())
            .sum();
        let eligible_max = op.max_time() as f64;
        pair_feats.push([
            p,
            p / eligible_max,
            p / max_schedulable_on[action.machine],
            p / global_max,
            p / max_unscheduled_on[action.machine],
            p / eligible_max,
            p / job_workload,
            op_waiting_time(state, action.job, action.pos)
                + machine_waiting_time(state, action.machine),
        ]);
        pairs.push(PairRef {
            op_row,
            machine: action.machine,
        });
    }

    Ok(FeatureFrame {
        op_rows,
        op_eligible,
        op_feats,
        mach_feats,
        pair_feats,
        pairs,
    })
}

/// Per-column mean and standard deviation over a training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub op_mean: [f64; OP_FEATURES],
    pub op_std: [f64; OP_FEATURES],
    pub mach_mean: [f64; MACHINE_FEATURES],
    pub mach_std: [f64; MACHINE_FEATURES],
    pub pair_mean: [f64; PAIR_FEATURES],
    pub pair_std: [f64; PAIR_FEATURES],
}

impl NormStats {
    /// Identity statistics (mean 0, std 1); useful for untrained pipelines.
    pub fn identity() -> NormStats {
        NormStats {
            op_mean: [0.0; OP_FEATURES],
            op_std: [1.0; OP_FEATURES],
            mach_mean: [0.0; MACHINE_FEATURES],
            mach_std: [1.0; MACHINE_FEATURES],
            pair_mean: [0.0; PAIR_FEATURES],
            pair_std: [1.0; PAIR_FEATURES],
        }
    }
}

struct ColumnStats<const W: usize> {
    count: u64,
    sum: [f64; W],
    sum_sq: [f64; W],
}

impl<const W: usize> ColumnStats<W> {
    fn new() -> Self {
        ColumnStats {
            count: 0,
            sum: [0.0; W],
            sum_sq: [0.0; W],
        }
    }

    fn add(&mut self, row: &[f64; W]) {
        self.count += 1;
        for (i, &v) in row.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
    }

    fn finish(&self) -> ([f64; W], [f64; W]) {
        let mut mean = [0.0; W];
        let mut std = [0.0; W];
        if self.count == 0 {
            return (mean, [1.0; W]);
        }
        let n = self.count as f64;
        for i in 0..W {
            mean[i] = self.sum[i] / n;
            let var = (self.sum_sq[i] / n - mean[i] * mean[i]).max(0.0);
            std[i] = var.sqrt();
        }
        (mean, std)
    }
}

/// Fits z-score statistics over every row of the given frames.
pub fn fit_normalizer<'a, I>(frames: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FeatureFrame>,
{
    let mut op = ColumnStats::<OP_FEATURES>::new();
    let mut mach = ColumnStats::<MACHINE_FEATURES>::new();
    let mut pair = ColumnStats::<PAIR_FEATURES>::new();
    let mut any = false;
    for frame in frames {
        any = true;
        frame.op_feats.iter().for_each(|r| op.add(r));
        frame.mach_feats.iter().for_each(|r| mach.add(r));
        frame.pair_feats.iter().for_each(|r| pair.add(r));
    }
    if !any {
        return Err(Error::InvalidParameter(
            "cannot fit a normalizer on an empty dataset".into(),
        ));
    }
    let (op_mean, op_std) = op.finish();
    let (mach_mean, mach_std) = mach.finish();
    let (pair_mean, pair_std) = pair.finish();
    Ok(NormStats {
        op_mean,
        op_std,
        mach_mean,
        mach_std,
        pair_mean,
        pair_std,
    })
}

const STD_FLOOR: f64 = 1e-6;

fn normalize_rows<const W: usize>(rows: &mut [[f64; W]], mean: &[f64; W], std: &[f64; W]) {
    for row in rows {
        for i in 0..W {
            row[i] = (row[i] - mean[i]) / std[i].max(STD_FLOOR);
        }
    }
}

/// Maps every feature to `(x - mean) / max(std, 1e-6)`.
pub fn apply_normalizer(frame: &FeatureFrame, stats: &NormStats) -> FeatureFrame {
    let mut out = frame.clone();
    normalize_rows(&mut out.op_feats, &stats.op_mean, &stats.op_std);
    normalize_rows(&mut out.mach_feats, &stats.mach_mean, &stats.mach_std);
    normalize_rows(&mut out.pair_feats, &stats.pair_mean, &stats.pair_std);
    out
}
