//! Behavior policies that generate offline data: priority dispatching rules
//! (4 job rules x 4 machine rules for flexible instances, 4 job rules for
//! pure job-shop), a seeded random policy, and a genetic algorithm.

mod ga;

pub use ga::{ga_solve, Chromosome, GaConfig, GaResult};

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instance::Kind;
use crate::sim::{Action, Policy, SimState};

/// Job selection rule of a priority dispatching rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobRule {
    /// Most operations remaining.
    Mor,
    /// Least operations remaining.
    Lor,
    /// Most work remaining (processing times averaged over eligible machines).
    Mwr,
    /// Least work remaining.
    Lwr,
}

/// Machine selection rule of a priority dispatching rule. Has no effect on
/// pure job-shop instances, where each operation has a single machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MachineRule {
    /// Shortest processing time.
    Spt,
    /// Longest processing time.
    Lpt,
    /// Earliest start time: the machine free for the shortest time.
    Est,
    /// Latest start time: the machine free for the longest time.
    Lst,
}

impl JobRule {
    pub const ALL: [JobRule; 4] = [JobRule::Mor, JobRule::Lor, JobRule::Mwr, JobRule::Lwr];

    pub fn name(self) -> &'static str {
        match self {
            JobRule::Mor => "MOR",
            JobRule::Lor => "LOR",
            JobRule::Mwr => "MWR",
            JobRule::Lwr => "LWR",
        }
    }
}

impl MachineRule {
    pub const ALL: [MachineRule; 4] = [
        MachineRule::Spt,
        MachineRule::Lpt,
        MachineRule::Est,
        MachineRule::Lst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MachineRule::Spt => "SPT",
            MachineRule::Lpt => "LPT",
            MachineRule::Est => "EST",
            MachineRule::Lst => "LST",
        }
    }
}

/// A deterministic dispatching rule: a job rule paired with a machine rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PdrSpec {
    pub job_rule: JobRule,
    pub machine_rule: MachineRule,
}

impl PdrSpec {
    pub fn name(&self) -> String {
        format!("{}-{}", self.job_rule.name(), self.machine_rule.name())
    }
}

impl FromStr for PdrSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase();
        let (job, machine) = upper.split_once('-').ok_or_else(|| {
            Error::InvalidParameter(format!("expected `<job>-<machine>` rule, got `{s}`"))
        })?;
        let job_rule = match job {
            "MOR" => JobRule::Mor,
            "LOR" => JobRule::Lor,
            "MWR" => JobRule::Mwr,
            "LWR" => JobRule::Lwr,
            _ => {
                return Err(Error::InvalidParameter(format!("unknown job rule `{job}`")));
            }
        };
        let machine_rule = match machine {
            "SPT" => MachineRule::Spt,
            "LPT" => MachineRule::Lpt,
            "EST" => MachineRule::Est,
            "LST" => MachineRule::Lst,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown machine rule `{machine}`"
                )));
            }
        };
        Ok(PdrSpec {
            job_rule,
            machine_rule,
        })
    }
}

/// All dispatching rules for an instance kind: the 16 combinations for
/// flexible instances, or the 4 job rules (machine rule fixed, inert) for
/// pure job-shop.
pub fn all_pdr_specs(kind: Kind) -> Vec<PdrSpec> {
    match kind {
        Kind::Fjsp => JobRule::ALL
            .iter()
            .flat_map(|&job_rule| {
                MachineRule::ALL.iter().map(move |&machine_rule| PdrSpec {
                    job_rule,
                    machine_rule,
                })
            })
            .collect(),
        Kind::Jsp => JobRule::ALL
            .iter()
            .map(|&job_rule| PdrSpec {
                job_rule,
                machine_rule: MachineRule::Spt,
            })
            .collect(),
    }
}

/// Remaining work of a job: sum over its unscheduled operations of the
/// processing time averaged over eligible machines.
fn remaining_work(state: &SimState, job: usize) -> f64 {
    let Some(front) = state.job_front(job) else {
        return 0.0;
    };
    state.instance().job(job).operations[front..]
        .iter()
        .map(|op| op.mean_time())
        .sum()
}

fn remaining_ops(state: &SimState, job: usize) -> usize {
    match state.job_front(job) {
        Some(front) => state.instance().job(job).operations.len() - front,
        None => 0,
    }
}

/// A priority dispatching rule as a policy over legal actions.
pub struct PdrPolicy {
    spec: PdrSpec,
}

impl PdrPolicy {
    pub fn new(spec: PdrSpec) -> Self {
        PdrPolicy { spec }
    }
}

impl Policy for PdrPolicy {
    fn choose(&mut self, state: &SimState, legal: &[Action]) -> usize {
        assert!(!legal.is_empty(), "dispatching rule needs a legal action");

        // Job rule: among jobs with a legal pair, pick by the rule's score;
        // ties resolve to the lowest job index (legal actions are ordered by
        // job, so a strict improvement test does both).
        let mut best_job = legal[0].job;
        let mut best_score = job_score(self.spec.job_rule, state, best_job);
        for action in &legal[1..] {
            if action.job == best_job {
                continue;
            }
            let score = job_score(self.spec.job_rule, state, action.job);
            if score > best_score {
                best_job = action.job;
                best_score = score;
            }
        }

        // Machine rule among the chosen job's legal machines; ties resolve to
        // the lowest machine index (legal order again).
        let mut best_index = None;
        let mut best_mscore = f64::NEG_INFINITY;
        for (i, action) in legal.iter().enumerate() {
            if action.job != best_job {
                continue;
            }
            let score = machine_score(self.spec.machine_rule, state, *action);
            if score > best_mscore {
                best_mscore = score;
                best_index = Some(i);
            }
        }
        best_index.expect("chosen job has a legal action")
    }
}

/// Higher is better for the given rule.
fn job_score(rule: JobRule, state: &SimState, job: usize) -> f64 {
    match rule {
        JobRule::Mor => remaining_ops(state, job) as f64,
        JobRule::Lor => -(remaining_ops(state, job) as f64),
        JobRule::Mwr => remaining_work(state, job),
        JobRule::Lwr => -remaining_work(state, job),
    }
}

fn machine_score(rule: MachineRule, state: &SimState, action: Action) -> f64 {
    let p = state
        .instance()
        .operation(action.job, action.pos)
        .processing_time(action.machine)
        .expect("legal action is eligible") as f64;
    match rule {
        MachineRule::Spt => -p,
        MachineRule::Lpt => p,
        // Idle duration = now - release time; never-used machines released at 0.
        // EST prefers the machine free the shortest (just freed), LST the longest.
        MachineRule::Est => state.machine_free_at(action.machine) as f64,
        MachineRule::Lst => -(state.machine_free_at(action.machine) as f64),
    }
}

/// Uniform choice over legal actions, seeded.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn choose(&mut self, _state: &SimState, legal: &[Action]) -> usize {
        self.rng.gen_range(0..legal.len())
    }
}
