//! The scheduling MDP: decision-point states, legal machine-operation pairs,
//! transitions with makespan-increase rewards, schedule traces, and an
//! independent trace validator.
//!
//! Dispatching is non-delay: an action assigns a ready operation to a machine
//! that is free at the current time, and time only advances when no legal
//! pair remains.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instance::Instance;

/// Dispatch of one operation `(job, pos)` onto a machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Action {
    pub job: usize,
    pub pos: usize,
    pub machine: usize,
}

/// Scheduling status of a single operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpState {
    Unscheduled,
    Scheduled {
        start: u64,
        end: u64,
        machine: usize,
    },
}

impl OpState {
    pub fn is_scheduled(&self) -> bool {
        matches!(self, OpState::Scheduled { .. })
    }
}

/// One dispatched operation in a schedule trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TraceStep {
    pub job: usize,
    pub pos: usize,
    pub machine: usize,
    pub start: u64,
    pub end: u64,
}

/// An ordered record of dispatches plus the resulting makespan. Replaying the
/// steps from the initial state reproduces identical starts and ends.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleTrace {
    pub steps: Vec<TraceStep>,
    pub makespan: u64,
}

impl ScheduleTrace {
    /// Line-delimited `(job, op, machine, start, end)` export.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                s.job, s.pos, s.machine, s.start, s.end
            ));
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<ScheduleTrace> {
        let mut steps = Vec::new();
        let mut makespan = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<u64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("expected integer, got `{t}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            steps.push(TraceStep {
                job: fields[0] as usize,
                pos: fields[1] as usize,
                machine: fields[2] as usize,
                start: fields[3],
                end: fields[4],
            });
            makespan = makespan.max(fields[4]);
        }
        Ok(ScheduleTrace { steps, makespan })
    }
}

/// Makespan of a complete trace; errors if any operation of the instance is
/// missing or duplicated.
pub fn trace_makespan(trace: &ScheduleTrace, instance: &Instance) -> Result<u64> {
    let mut seen = vec![false; instance.num_ops()];
    for step in &trace.steps {
        if step.job >= instance.num_jobs() || step.pos >= instance.job(step.job).operations.len() {
            return Err(Error::Contract(format!(
                "trace references unknown operation ({}, {})",
                step.job, step.pos
            )));
        }
        let flat = instance.flat_index(step.job, step.pos);
        if seen[flat] {
            return Err(Error::Contract(format!(
                "operation ({}, {}) appears twice in trace",
                step.job, step.pos
            )));
        }
        seen[flat] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Contract("incomplete trace".into()));
    }
    Ok(trace.steps.iter().map(|s| s.end).max().unwrap_or(0))
}

/// A partial schedule at a decision point.
#[derive(Debug, Clone)]
pub struct SimState {
    instance: Arc<Instance>,
    now: u64,
    machine_free_at: Vec<u64>,
    op_state: Vec<OpState>,
    job_front: Vec<usize>,
    scheduled_count: usize,
    partial_makespan: u64,
}

impl SimState {
    /// Initial state: time zero, all machines free, nothing scheduled.
    pub fn initial(instance: Arc<Instance>) -> SimState {
        let num_ops = instance.num_ops();
        let m = instance.num_machines();
        let n = instance.num_jobs();
        SimState {
            instance,
            now: 0,
            machine_free_at: vec![0; m],
            op_state: vec![OpState::Unscheduled; num_ops],
            job_front: vec![0; n],
            scheduled_count: 0,
            partial_makespan: 0,
        }
    }

    pub fn instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn partial_makespan(&self) -> u64 {
        self.partial_makespan
    }

    pub fn machine_free_at(&self, machine: usize) -> u64 {
        self.machine_free_at[machine]
    }

    pub fn op_state(&self, job: usize, pos: usize) -> OpState {
        self.op_state[self.instance.flat_index(job, pos)]
    }

    /// Index of the next unscheduled operation of `job`, if any.
    pub fn job_front(&self, job: usize) -> Option<usize> {
        let front = self.job_front[job];
        (front < self.instance.job(job).operations.len()).then_some(front)
    }

    pub fn is_terminal(&self) -> bool {
        self.scheduled_count == self.instance.num_ops()
    }

    /// Completion time of the predecessor of `(job, pos)`; 0 for a job's
    /// first operation. Only meaningful when the predecessor is scheduled.
    fn pred_end(&self, job: usize, pos: usize) -> Option<u64> {
        if pos == 0 {
            return Some(0);
        }
        match self.op_state[self.instance.flat_index(job, pos - 1)] {
            OpState::Scheduled { end, .. } => Some(end),
            OpState::Unscheduled => None,
        }
    }

    /// Time at which `(job, pos)` became (or becomes) ready; `None` while its
    /// predecessor is unscheduled.
    pub fn ready_at(&self, job: usize, pos: usize) -> Option<u64> {
        self.pred_end(job, pos)
    }

    /// All legal machine-operation pairs at the current time, ordered by job
    /// index then machine index. Empty exactly when the state is terminal.
    pub fn legal_actions(&self) -> Vec<Action> {
        let mut actions = Vec::new();
        for job in 0..self.instance.num_jobs() {
            let Some(pos) = self.job_front(job) else {
                continue;
            };
            let Some(ready) = self.pred_end(job, pos) else {
                continue;
            };
            if ready > self.now {
                continue;
            }
            for &(machine, _) in self.instance.operation(job, pos).eligible() {
                if self.machine_free_at[machine] <= self.now {
                    actions.push(Action { job, pos, machine });
                }
            }
        }
        actions
    }

    fn is_legal(&self, action: Action) -> bool {
        if action.job >= self.instance.num_jobs() {
            return false;
        }
        if self.job_front(action.job) != Some(action.pos) {
            return false;
        }
        match self.pred_end(action.job, action.pos) {
            Some(ready) if ready <= self.now => {}
            _ => return false,
        }
        if self.machine_free_at[action.machine] > self.now {
            return false;
        }
        self.instance
            .operation(action.job, action.pos)
            .processing_time(action.machine)
            .is_some()
    }

    /// Applies a legal action: the operation runs on its machine starting at
    /// the current time, then time auto-advances to the next decision point.
    /// Returns the reward, the negative increase in partial makespan.
    pub fn step(&mut self, action: Action) -> Result<i64> {
        if !self.is_legal(action) {
            return Err(Error::Contract(format!(
                "illegal action: job {} op {} on machine {} at t={}",
                action.job, action.pos, action.machine, self.now
            )));
        }
        let p = self
            .instance
            .operation(action.job, action.pos)
            .processing_time(action.machine)
            .unwrap() as u64;
        let start = self.now;
        let end = start + p;
        let flat = self.instance.flat_index(action.job, action.pos);
        self.op_state[flat] = OpState::Scheduled {
            start,
            end,
            machine: action.machine,
        };
        self.machine_free_at[action.machine] = end;
        self.job_front[action.job] += 1;
        self.scheduled_count += 1;
        let before = self.partial_makespan;
        self.partial_makespan = self.partial_makespan.max(end);
        self.advance_time();
        Ok(before as i64 - self.partial_makespan as i64)
    }

    /// While no pair is dispatchable and work remains, jump to the earliest
    /// event (machine release or predecessor completion) that unlocks one.
    fn advance_time(&mut self) {
        while !self.is_terminal() && self.legal_actions().is_empty() {
            let mut next: Option<u64> = None;
            for job in 0..self.instance.num_jobs() {
                let Some(pos) = self.job_front(job) else {
                    continue;
                };
                // Front ops always have scheduled predecessors.
                let ready = self.pred_end(job, pos).unwrap();
                for &(machine, _) in self.instance.operation(job, pos).eligible() {
                    let at = ready.max(self.machine_free_at[machine]);
                    if at > self.now {
                        next = Some(next.map_or(at, |n| n.min(at)));
                    }
                }
            }
            // Work remains and nothing is legal, so some pair unlocks later.
            self.now = next.expect("stuck state: unscheduled ops but no future event");
        }
    }

    /// Stable fingerprint of the partial schedule: the current time plus the
    /// sorted set of scheduled `(job, pos, machine, start, end)` tuples.
    pub fn canonical_key(&self) -> u64 {
        let mut scheduled: Vec<(usize, usize, usize, u64, u64)> = Vec::new();
        for job in 0..self.instance.num_jobs() {
            for pos in 0..self.instance.job(job).operations.len() {
                if let OpState::Scheduled {
                    start,
                    end,
                    machine,
                } = self.op_state[self.instance.flat_index(job, pos)]
                {
                    scheduled.push((job, pos, machine, start, end));
                }
            }
        }
        scheduled.sort_unstable();
        let mut hash = Fnv64::new();
        hash.write_u64(self.now);
        for (job, pos, machine, start, end) in scheduled {
            hash.write_u64(job as u64);
            hash.write_u64(pos as u64);
            hash.write_u64(machine as u64);
            hash.write_u64(start);
            hash.write_u64(end);
        }
        hash.finish()
    }
}

/// FNV-1a, fixed so persisted keys stay stable across toolchains.
struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// A decision rule over the legal actions of a state. Returns an index into
/// the `legal` slice.
pub trait Policy {
    fn choose(&mut self, state: &SimState, legal: &[Action]) -> usize;
}

/// Runs one full episode, invoking `observer` before each transition with
/// `(state, legal actions, chosen index, reward, next state)`.
pub fn rollout_observed<F>(
    instance: &Arc<Instance>,
    policy: &mut dyn Policy,
    mut observer: F,
) -> Result<ScheduleTrace>
where
    F: FnMut(&SimState, &[Action], usize, i64, &SimState),
{
    let mut state = SimState::initial(Arc::clone(instance));
    let mut steps = Vec::with_capacity(instance.num_ops());
    while !state.is_terminal() {
        let legal = state.legal_actions();
        debug_assert!(!legal.is_empty(), "non-terminal state with no actions");
        let index = policy.choose(&state, &legal);
        assert!(index < legal.len(), "policy chose out-of-range action");
        let action = legal[index];
        let before = state.clone();
        let start = state.now();
        let reward = state.step(action)?;
        let p = instance
            .operation(action.job, action.pos)
            .processing_time(action.machine)
            .unwrap() as u64;
        steps.push(TraceStep {
            job: action.job,
            pos: action.pos,
            machine: action.machine,
            start,
            end: start + p,
        });
        observer(&before, &legal, index, reward, &state);
    }
    Ok(ScheduleTrace {
        makespan: state.partial_makespan(),
        steps,
    })
}

/// Runs one full episode and returns its trace.
pub fn rollout(instance: &Arc<Instance>, policy: &mut dyn Policy) -> Result<ScheduleTrace> {
    rollout_observed(instance, policy, |_, _, _, _, _| {})
}

/// A single feasibility violation found in a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Operation starts before its predecessor ends (or the predecessor is missing).
    Precedence { job: usize, pos: usize },
    /// Two intervals on one machine overlap.
    MachineOverlap { machine: usize },
    /// Operation dispatched on a machine outside its eligible set.
    Eligibility { job: usize, pos: usize, machine: usize },
    /// Interval length does not match the processing time.
    Duration { job: usize, pos: usize },
    /// Operation appears twice, or references an unknown operation.
    Malformed { job: usize, pos: usize },
    /// Starts are not non-decreasing in dispatch order.
    DispatchOrder { index: usize },
    /// Start is later than both the predecessor end and the machine release,
    /// which a non-delay dispatcher cannot produce.
    NotTight { job: usize, pos: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Precedence { job, pos } => {
                write!(f, "precedence violated at operation ({job}, {pos})")
            }
            Violation::MachineOverlap { machine } => {
                write!(f, "machine overlap on machine {machine}")
            }
            Violation::Eligibility { job, pos, machine } => {
                write!(f, "operation ({job}, {pos}) not eligible on machine {machine}")
            }
            Violation::Duration { job, pos } => {
                write!(f, "duration mismatch at operation ({job}, {pos})")
            }
            Violation::Malformed { job, pos } => {
                write!(f, "malformed trace entry for operation ({job}, {pos})")
            }
            Violation::DispatchOrder { index } => {
                write!(f, "dispatch order violated at trace index {index}")
            }
            Violation::NotTight { job, pos } => {
                write!(f, "operation ({job}, {pos}) starts later than a non-delay dispatch allows")
            }
        }
    }
}

/// Checks a trace against the instance: precedence, machine-disjointness,
/// eligibility, durations, dispatch-order monotonicity, and the non-delay
/// tightness rule (each start equals the decision time it was dispatched at,
/// i.e. the max of predecessor end and machine release). Independent of the
/// simulator's step logic.
pub fn validate(trace: &ScheduleTrace, instance: &Instance) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = vec![false; instance.num_ops()];
    let mut per_machine: Vec<Vec<(u64, u64, usize, usize)>> =
        vec![Vec::new(); instance.num_machines()];
    let mut end_of: Vec<Option<u64>> = vec![None; instance.num_ops()];

    let mut last_start = 0;
    for (i, step) in trace.steps.iter().enumerate() {
        if step.job >= instance.num_jobs()
            || step.pos >= instance.job(step.job).operations.len()
            || step.machine >= instance.num_machines()
        {
            violations.push(Violation::Malformed {
                job: step.job,
                pos: step.pos,
            });
            continue;
        }
        let flat = instance.flat_index(step.job, step.pos);
        if seen[flat] {
            violations.push(Violation::Malformed {
                job: step.job,
                pos: step.pos,
            });
            continue;
        }
        seen[flat] = true;
        if step.start < last_start {
            violations.push(Violation::DispatchOrder { index: i });
        }
        last_start = last_start.max(step.start);
        match instance
            .operation(step.job, step.pos)
            .processing_time(step.machine)
        {
            None => violations.push(Violation::Eligibility {
                job: step.job,
                pos: step.pos,
                machine: step.machine,
            }),
            Some(p) => {
                if step.end != step.start + p as u64 {
                    violations.push(Violation::Duration {
                        job: step.job,
                        pos: step.pos,
                    });
                }
            }
        }
        end_of[flat] = Some(step.end);
        per_machine[step.machine].push((step.start, step.end, step.job, step.pos));
    }

    // Precedence: each scheduled op must start at or after its predecessor's end.
    for step in &trace.steps {
        if step.pos == 0 || step.job >= instance.num_jobs() {
            continue;
        }
        if step.pos >= instance.job(step.job).operations.len() {
            continue;
        }
        let pred = instance.flat_index(step.job, step.pos - 1);
        match end_of[pred] {
            Some(end) if step.start >= end => {}
            _ => violations.push(Violation::Precedence {
                job: step.job,
                pos: step.pos,
            }),
        }
    }

    // Machine disjointness and per-machine tightness hints.
    let mut machine_prev_end: std::collections::HashMap<(usize, usize), u64> =
        std::collections::HashMap::new();
    for (machine, intervals) in per_machine.iter_mut().enumerate() {
        intervals.sort_unstable();
        for window in intervals.windows(2) {
            if window[1].0 < window[0].1 {
                violations.push(Violation::MachineOverlap { machine });
            }
        }
        let mut prev_end = 0;
        for &(start, end, job, pos) in intervals.iter() {
            machine_prev_end.insert((job, pos), prev_end);
            prev_end = prev_end.max(end);
            let _ = start;
        }
    }

    // Tightness: start == max(predecessor end, previous end on the machine).
    for step in &trace.steps {
        if step.job >= instance.num_jobs()
            || step.pos >= instance.job(step.job).operations.len()
        {
            continue;
        }
        let pred_end = if step.pos == 0 {
            Some(0)
        } else {
            end_of[instance.flat_index(step.job, step.pos - 1)]
        };
        let (Some(pred_end), Some(&machine_end)) =
            (pred_end, machine_prev_end.get(&(step.job, step.pos)))
        else {
            continue; // already reported as precedence/malformed
        };
        if step.start != pred_end.max(machine_end) {
            violations.push(Violation::NotTight {
                job: step.job,
                pos: step.pos,
            });
        }
    }

    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::tiny1;
    use crate::instance::{generate_fjsp, Job, Operation};

    fn act(job: usize, pos: usize, machine: usize) -> Action {
        Action { job, pos, machine }
    }

    #[test]
    fn initial_state_of_tiny1() {
        let inst = Arc::new(tiny1());
        let state = SimState::initial(Arc::clone(&inst));
        assert_eq!(state.now(), 0);
        assert_eq!(state.partial_makespan(), 0);
        assert_eq!(inst.num_ops(), 4);
        assert!(!state.is_terminal());
        assert!(!state.legal_actions().is_empty());
    }

    #[test]
    fn tiny1_initial_legal_actions() {
        let state = SimState::initial(Arc::new(tiny1()));
        assert_eq!(
            state.legal_actions(),
            vec![act(0, 0, 0), act(0, 0, 1), act(1, 0, 0)]
        );
    }

    #[test]
    fn tiny1_first_step_reward_and_busy_machine() {
        let mut state = SimState::initial(Arc::new(tiny1()));
        let reward = state.step(act(0, 0, 0)).unwrap();
        // First dispatch raises the partial makespan from 0 to 3.
        assert_eq!(reward, -3);
        assert_eq!(state.partial_makespan(), 3);
        // J2's only option needs machine 0, which is busy until 3, so time
        // advanced to the release event.
        assert_eq!(state.now(), 3);
        assert_eq!(
            state.legal_actions(),
            vec![act(0, 1, 1), act(1, 0, 0)]
        );
    }

    #[test]
    fn terminal_state_has_no_actions() {
        let inst = Arc::new(tiny1());
        let mut state = SimState::initial(Arc::clone(&inst));
        while !state.is_terminal() {
            let legal = state.legal_actions();
            state.step(legal[0]).unwrap();
        }
        assert!(state.legal_actions().is_empty());
    }

    #[test]
    fn rewards_telescope_to_negative_makespan() {
        let inst = Arc::new(generate_fjsp(4, 3, 21).unwrap());
        let mut policy = crate::heuristics::RandomPolicy::new(5);
        let mut total = 0i64;
        let trace = rollout_observed(&inst, &mut policy, |_, _, _, r, _| total += r).unwrap();
        assert_eq!(total, -(trace.makespan as i64));
        assert_eq!(trace.steps.len(), inst.num_ops());
    }

    #[test]
    fn illegal_actions_are_contract_errors() {
        let mut state = SimState::initial(Arc::new(tiny1()));
        // Machine 1 is not eligible for J2's first op.
        assert!(state.step(act(1, 0, 1)).is_err());
        // Second op of a job cannot go before the first.
        assert!(state.step(act(0, 1, 1)).is_err());
    }

    #[test]
    fn single_machine_serial_chain_makespans() {
        // One job, two ops (3 then 4) on one machine: makespan 7.
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
        let mut policy = FirstLegal;
        let trace = rollout(&inst, &mut policy).unwrap();
        assert_eq!(trace.makespan, 7);

        // Two one-op jobs on the same machine: 3 + 4 = 7.
        let inst = Arc::new(
            Instance::new(
                1,
                vec![
                    Job {
                        operations: vec![Operation::new(vec![(0, 3)])],
                    },
                    Job {
                        operations: vec![Operation::new(vec![(0, 4)])],
                    },
                ],
            )
            .unwrap(),
        );
        let trace = rollout(&inst, &mut FirstLegal).unwrap();
        assert_eq!(trace.makespan, 7);
        assert_eq!(trace_makespan(&trace, &inst).unwrap(), 7);
    }

    struct FirstLegal;

    impl Policy for FirstLegal {
        fn choose(&mut self, _: &SimState, _: &[Action]) -> usize {
            0
        }
    }

    #[test]
    fn simulator_traces_validate_clean() {
        for seed in 0..20 {
            let inst = Arc::new(generate_fjsp(4, 3, 100 + seed).unwrap());
            let mut policy = crate::heuristics::RandomPolicy::new(seed);
            let trace = rollout(&inst, &mut policy).unwrap();
            assert_eq!(validate(&trace, &inst), vec![]);
        }
    }

    #[test]
    fn validator_flags_machine_overlap() {
        let inst = tiny1();
        let trace = ScheduleTrace {
            steps: vec![
                TraceStep { job: 0, pos: 0, machine: 0, start: 0, end: 3 },
                TraceStep { job: 1, pos: 0, machine: 0, start: 2, end: 4 },
            ],
            makespan: 4,
        };
        let violations = validate(&trace, &inst);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::MachineOverlap { machine: 0 })));
    }

    #[test]
    fn validator_flags_precedence() {
        let inst = tiny1();
        // O12 before O11 ends.
        let trace = ScheduleTrace {
            steps: vec![
                TraceStep { job: 0, pos: 0, machine: 0, start: 0, end: 3 },
                TraceStep { job: 0, pos: 1, machine: 1, start: 1, end: 5 },
            ],
            makespan: 5,
        };
        let violations = validate(&trace, &inst);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::Precedence { job: 0, pos: 1 })));
    }

    #[test]
    fn incomplete_trace_makespan_is_error() {
        let inst = tiny1();
        let trace = ScheduleTrace {
            steps: vec![TraceStep { job: 0, pos: 0, machine: 0, start: 0, end: 3 }],
            makespan: 3,
        };
        assert!(trace_makespan(&trace, &inst).is_err());
    }

    #[test]
    fn trace_lines_round_trip() {
        let inst = Arc::new(tiny1());
        let trace = rollout(&inst, &mut FirstLegal).unwrap();
        let text = trace.to_lines();
        assert_eq!(ScheduleTrace::from_lines(&text).unwrap(), trace);
    }

    #[test]
    fn time_and_makespan_are_monotone() {
        let inst = Arc::new(generate_fjsp(5, 3, 77).unwrap());
        let mut policy = crate::heuristics::RandomPolicy::new(3);
        let mut last_now = 0;
        let mut last_mk = 0;
        rollout_observed(&inst, &mut policy, |_, _, _, _, after| {
            assert!(after.now() >= last_now);
            assert!(after.partial_makespan() >= last_mk);
            last_now = after.now();
            last_mk = after.partial_makespan();
        })
        .unwrap();
    }
}
