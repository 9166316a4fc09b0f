//! Problem instances: representation, random generation, benchmark-format
//! parsing and canonical serialization.
//!
//! Internal indices (jobs, operations, machines) are 0-based everywhere; the
//! 1-based conventions of the file formats are handled at the parser boundary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Problem class. `Jsp` means every operation has exactly one eligible
/// machine; `Fjsp` means at least one operation has a choice.
///
/// The kind is derived from the structure so that parsing and serialization
/// are exact inverses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Jsp,
    Fjsp,
}

/// One operation: the set of machines that can process it, with the integer
/// processing time on each. Entries are sorted by machine index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    eligible: Vec<(usize, u32)>,
}

impl Operation {
    pub fn new(mut eligible: Vec<(usize, u32)>) -> Self {
        eligible.sort_by_key(|&(machine, _)| machine);
        Operation { eligible }
    }

    /// `(machine, processing time)` pairs, sorted by machine index.
    pub fn eligible(&self) -> &[(usize, u32)] {
        &self.eligible
    }

    pub fn processing_time(&self, machine: usize) -> Option<u32> {
        self.eligible
            .iter()
            .find(|&&(m, _)| m == machine)
            .map(|&(_, p)| p)
    }

    pub fn min_time(&self) -> u32 {
        self.eligible.iter().map(|&(_, p)| p).min().unwrap_or(0)
    }

    pub fn max_time(&self) -> u32 {
        self.eligible.iter().map(|&(_, p)| p).max().unwrap_or(0)
    }

    pub fn mean_time(&self) -> f64 {
        let total: u64 = self.eligible.iter().map(|&(_, p)| p as u64).sum();
        total as f64 / self.eligible.len() as f64
    }
}

/// A job: an ordered chain of operations under strict precedence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub operations: Vec<Operation>,
}

/// An immutable scheduling problem: `n` jobs over `m` machines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    num_machines: usize,
    jobs: Vec<Job>,
    /// Flat index of each job's first operation; `op_offsets[n] == num_ops`.
    op_offsets: Vec<usize>,
}

impl Instance {
    /// Builds an instance, checking every structural invariant: at least one
    /// job, at least one machine, non-empty jobs, non-empty eligible sets with
    /// in-range machines, and strictly positive processing times.
    pub fn new(num_machines: usize, jobs: Vec<Job>) -> Result<Self> {
        if jobs.is_empty() {
            return Err(Error::InvalidInstance("instance has no jobs".into()));
        }
        if num_machines == 0 {
            return Err(Error::InvalidInstance("instance has no machines".into()));
        }
        for (j, job) in jobs.iter().enumerate() {
            if job.operations.is_empty() {
                return Err(Error::InvalidInstance(format!("job {j} has no operations")));
            }
            for (o, op) in job.operations.iter().enumerate() {
                if op.eligible.is_empty() {
                    return Err(Error::InvalidInstance(format!(
                        "operation ({j},{o}) has no eligible machines"
                    )));
                }
                let mut seen = vec![false; num_machines];
                for &(machine, p) in &op.eligible {
                    if machine >= num_machines {
                        return Err(Error::InvalidInstance(format!(
                            "operation ({j},{o}) references machine {machine} out of range"
                        )));
                    }
                    if seen[machine] {
                        return Err(Error::InvalidInstance(format!(
                            "operation ({j},{o}) lists machine {machine} twice"
                        )));
                    }
                    seen[machine] = true;
                    if p == 0 {
                        return Err(Error::InvalidInstance(format!(
                            "operation ({j},{o}) has zero processing time on machine {machine}"
                        )));
                    }
                }
            }
        }
        let mut op_offsets = Vec::with_capacity(jobs.len() + 1);
        let mut total = 0;
        for job in &jobs {
            op_offsets.push(total);
            total += job.operations.len();
        }
        op_offsets.push(total);
        Ok(Instance {
            num_machines,
            jobs,
            op_offsets,
        })
    }

    pub fn kind(&self) -> Kind {
        let all_single = self
            .jobs
            .iter()
            .flat_map(|j| &j.operations)
            .all(|op| op.eligible.len() == 1);
        if all_single {
            Kind::Jsp
        } else {
            Kind::Fjsp
        }
    }

    pub fn num_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn num_machines(&self) -> usize {
        self.num_machines
    }

    pub fn jobs(&self) -> &[Job] {
        &self.jobs
    }

    pub fn job(&self, job: usize) -> &Job {
        &self.jobs[job]
    }

    pub fn operation(&self, job: usize, pos: usize) -> &Operation {
        &self.jobs[job].operations[pos]
    }

    pub fn num_ops(&self) -> usize {
        *self.op_offsets.last().unwrap()
    }

    /// Flat operation index for `(job, pos)`.
    pub fn flat_index(&self, job: usize, pos: usize) -> usize {
        self.op_offsets[job] + pos
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn op_at(&self, flat: usize) -> (usize, usize) {
        let job = match self.op_offsets.binary_search(&flat) {
            Ok(mut j) => {
                // Offsets of empty jobs cannot occur; equal offsets only at job starts.
                while j + 1 < self.op_offsets.len() - 1 && self.op_offsets[j + 1] == flat {
                    j += 1;
                }
                j
            }
            Err(j) => j - 1,
        };
        (job, flat - self.op_offsets[job])
    }

    /// Largest processing time over all `(operation, machine)` pairs.
    pub fn max_processing_time(&self) -> u32 {
        self.jobs
            .iter()
            .flat_map(|j| &j.operations)
            .map(Operation::max_time)
            .max()
            .unwrap_or(0)
    }

    /// Average number of eligible machines per operation.
    pub fn mean_flexibility(&self) -> f64 {
        let total: usize = self
            .jobs
            .iter()
            .flat_map(|j| &j.operations)
            .map(|op| op.eligible.len())
            .sum();
        total as f64 / self.num_ops() as f64
    }
}

/// Generates a flexible instance: each job gets between `max(1, floor(0.8 m))`
/// and `floor(1.2 m)` operations, each operation a uniformly sized subset of
/// machines drawn without replacement, and every eligible pair an independent
/// integer processing time in `[1, 99]`. Pure function of `(n, m, seed)`.
pub fn generate_fjsp(n: usize, m: usize, seed: u64) -> Result<Instance> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "generate_fjsp requires n >= 1 and m >= 1, got n={n} m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = ((0.8 * m as f64).floor() as usize).max(1);
    let hi = ((1.2 * m as f64).floor() as usize).max(lo);
    let mut jobs = Vec::with_capacity(n);
    let mut machine_pool: Vec<usize> = (0..m).collect();
    for _ in 0..n {
        let ops_count = rng.gen_range(lo..=hi);
        let mut operations = Vec::with_capacity(ops_count);
        for _ in 0..ops_count {
            let k = rng.gen_range(1..=m);
            machine_pool.shuffle(&mut rng);
            let eligible = machine_pool[..k]
                .iter()
                .map(|&machine| (machine, rng.gen_range(1..=99)))
                .collect();
            operations.push(Operation::new(eligible));
        }
        jobs.push(Job { operations });
    }
    Instance::new(m, jobs)
}

/// Generates a square job-shop instance: each job visits every machine exactly
/// once in a uniformly random order, with processing times in `[1, 99]`.
pub fn generate_jsp(n: usize, m: usize, seed: u64) -> Result<Instance> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "generate_jsp requires n >= 1 and m >= 1, got n={n} m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(n);
    let mut perm: Vec<usize> = (0..m).collect();
    for _ in 0..n {
        perm.shuffle(&mut rng);
        let operations = perm
            .iter()
            .map(|&machine| Operation::new(vec![(machine, rng.gen_range(1..=99))]))
            .collect();
        jobs.push(Job { operations });
    }
    Instance::new(m, jobs)
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

struct LineTokens<'a> {
    tokens: std::str::SplitWhitespace<'a>,
    line_no: usize,
}

impl<'a> LineTokens<'a> {
    fn next_usize(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .tokens
            .next()
            .ok_or_else(|| parse_err(self.line_no, format!("truncated line, expected {what}")))?;
        tok.parse()
            .map_err(|_| parse_err(self.line_no, format!("expected {what}, got `{tok}`")))
    }

    fn finish(mut self) -> Result<()> {
        match self.tokens.next() {
            Some(tok) => Err(parse_err(
                self.line_no,
                format!("unexpected trailing token `{tok}`"),
            )),
            None => Ok(()),
        }
    }
}

/// Non-empty lines with their 1-based line numbers.
fn content_lines(text: &str) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect()
}

/// Parses the conventional flexible job-shop text format: a header line
/// `n m [avg-flexibility]`, then one line per job holding the operation count
/// followed, per operation, by the machine count and that many
/// `(machine, time)` pairs. Machine indices in the file are 1-based.
///
/// The average-flexibility header field is ignored on read (it is derivable)
/// and recomputed on write.
pub fn parse_standard_fjsp(text: &str) -> Result<Instance> {
    let lines = content_lines(text);
    if lines.is_empty() {
        return Err(parse_err(1, "empty input"));
    }
    let (header_no, header) = lines[0];
    let mut toks = header.split_whitespace();
    let n: usize = toks
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(header_no, "expected job count"))?;
    let m: usize = toks
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(header_no, "expected machine count"))?;
    // Optional average-flexibility field; anything further is an error.
    if let Some(flex) = toks.next() {
        flex.parse::<f64>()
            .map_err(|_| parse_err(header_no, format!("expected flexibility value, got `{flex}`")))?;
        if let Some(tok) = toks.next() {
            return Err(parse_err(
                header_no,
                format!("unexpected trailing token `{tok}`"),
            ));
        }
    }
    if lines.len() - 1 != n {
        return Err(parse_err(
            lines.last().map(|&(no, _)| no).unwrap_or(header_no),
            format!("expected {n} job lines, found {}", lines.len() - 1),
        ));
    }
    let mut jobs = Vec::with_capacity(n);
    for &(line_no, line) in &lines[1..] {
        let mut toks = LineTokens {
            tokens: line.split_whitespace(),
            line_no,
        };
        let ops_count = toks.next_usize("operation count")?;
        if ops_count == 0 {
            return Err(parse_err(line_no, "job with zero operations"));
        }
        let mut operations = Vec::with_capacity(ops_count);
        for _ in 0..ops_count {
            let k = toks.next_usize("machine count")?;
            if k == 0 {
                return Err(parse_err(line_no, "operation with zero eligible machines"));
            }
            let mut eligible = Vec::with_capacity(k);
            for _ in 0..k {
                let machine = toks.next_usize("machine index")?;
                let p = toks.next_usize("processing time")?;
                if machine == 0 || machine > m {
                    return Err(parse_err(
                        line_no,
                        format!("machine index {machine} out of [1, {m}]"),
                    ));
                }
                if p == 0 {
                    return Err(parse_err(line_no, "non-positive processing time"));
                }
                eligible.push((machine - 1, p as u32));
            }
            operations.push(Operation::new(eligible));
        }
        toks.finish()?;
        jobs.push(Job { operations });
    }
    Instance::new(m, jobs).map_err(|e| parse_err(header_no, e.to_string()))
}

/// Serializes an instance to the canonical flexible-format text. The header
/// carries the recomputed average flexibility; machine indices are written
/// 1-based. `parse_standard_fjsp(serialize(x)) == x`.
pub fn serialize(instance: &Instance) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {:.4}\n",
        instance.num_jobs(),
        instance.num_machines(),
        instance.mean_flexibility()
    ));
    for job in instance.jobs() {
        let mut fields = vec![job.operations.len().to_string()];
        for op in &job.operations {
            fields.push(op.eligible().len().to_string());
            for &(machine, p) in op.eligible() {
                fields.push((machine + 1).to_string());
                fields.push(p.to_string());
            }
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

/// Parses the interleaved job-shop format: a header line `n m`, then one line
/// per job with `m` pairs of `machine time`. `machine_index_base` selects the
/// file's machine numbering (0 for the common convention, 1 for one-based
/// files). Each job's machine list must be a permutation of all machines.
pub fn parse_taillard_jsp_with_base(text: &str, machine_index_base: usize) -> Result<Instance> {
    let lines = content_lines(text);
    if lines.is_empty() {
        return Err(parse_err(1, "empty input"));
    }
    let (header_no, header) = lines[0];
    let mut toks = LineTokens {
        tokens: header.split_whitespace(),
        line_no: header_no,
    };
    let n = toks.next_usize("job count")?;
    let m = toks.next_usize("machine count")?;
    toks.finish()?;
    if lines.len() - 1 != n {
        return Err(parse_err(
            lines.last().map(|&(no, _)| no).unwrap_or(header_no),
            format!("expected {n} job lines, found {}", lines.len() - 1),
        ));
    }
    let mut jobs = Vec::with_capacity(n);
    for &(line_no, line) in &lines[1..] {
        let mut toks = LineTokens {
            tokens: line.split_whitespace(),
            line_no,
        };
        let mut operations = Vec::with_capacity(m);
        let mut seen = vec![false; m];
        for _ in 0..m {
            let machine_raw = toks.next_usize("machine index")?;
            let p = toks.next_usize("processing time")?;
            let machine = machine_raw
                .checked_sub(machine_index_base)
                .ok_or_else(|| parse_err(line_no, format!("machine index {machine_raw} below base")))?;
            if machine >= m {
                return Err(parse_err(
                    line_no,
                    format!("machine index {machine_raw} out of range for {m} machines"),
                ));
            }
            if seen[machine] {
                return Err(parse_err(
                    line_no,
                    format!("machine sequence is not a permutation: machine {machine_raw} repeats"),
                ));
            }
            seen[machine] = true;
            if p == 0 {
                return Err(parse_err(line_no, "non-positive processing time"));
            }
            operations.push(Operation::new(vec![(machine, p as u32)]));
        }
        toks.finish()?;
        jobs.push(Job { operations });
    }
    Instance::new(m, jobs).map_err(|e| parse_err(header_no, e.to_string()))
}

/// [`parse_taillard_jsp_with_base`] with the common 0-based machine numbering.
pub fn parse_taillard_jsp(text: &str) -> Result<Instance> {
    parse_taillard_jsp_with_base(text, 0)
}

/// Serializes a pure job-shop instance to the interleaved format (0-based
/// machine indices). Errors if any operation has more than one eligible
/// machine.
pub fn serialize_taillard_jsp(instance: &Instance) -> Result<String> {
    if instance.kind() != Kind::Jsp {
        return Err(Error::InvalidParameter(
            "interleaved job-shop format requires exactly one machine per operation".into(),
        ));
    }
    let mut out = format!("{} {}\n", instance.num_jobs(), instance.num_machines());
    for job in instance.jobs() {
        let mut fields = Vec::with_capacity(job.operations.len() * 2);
        for op in &job.operations {
            let (machine, p) = op.eligible()[0];
            fields.push(machine.to_string());
            fields.push(p.to_string());
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fjsp_generation_respects_bounds() {
        let inst = generate_fjsp(10, 5, 1).unwrap();
        assert_eq!(inst.num_jobs(), 10);
        assert_eq!(inst.num_machines(), 5);
        for job in inst.jobs() {
            // floor(0.8 * 5) = 4, floor(1.2 * 5) = 6
            assert!((4..=6).contains(&job.operations.len()));
            for op in &job.operations {
                assert!(!op.eligible().is_empty() && op.eligible().len() <= 5);
                for &(machine, p) in op.eligible() {
                    assert!(machine < 5);
                    assert!((1..=99).contains(&p));
                }
            }
        }
    }

    #[test]
    fn fjsp_minimum_size_clamps_to_one_op() {
        let inst = generate_fjsp(1, 1, 7).unwrap();
        assert_eq!(inst.num_jobs(), 1);
        assert_eq!(inst.job(0).operations.len(), 1);
        let op = inst.operation(0, 0);
        assert_eq!(op.eligible().len(), 1);
        assert_eq!(op.eligible()[0].0, 0);
        assert!((1..=99).contains(&op.eligible()[0].1));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        assert_eq!(
            generate_fjsp(3, 2, 5).unwrap(),
            generate_fjsp(3, 2, 5).unwrap()
        );
        assert_eq!(
            generate_jsp(4, 3, 11).unwrap(),
            generate_jsp(4, 3, 11).unwrap()
        );
        assert_ne!(
            generate_fjsp(3, 2, 5).unwrap(),
            generate_fjsp(3, 2, 6).unwrap()
        );
    }

    #[test]
    fn jsp_machine_sequences_are_permutations() {
        let inst = generate_jsp(10, 5, 1).unwrap();
        for job in inst.jobs() {
            assert_eq!(job.operations.len(), 5);
            let mut machines: Vec<usize> =
                job.operations.iter().map(|op| op.eligible()[0].0).collect();
            machines.sort_unstable();
            assert_eq!(machines, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn jsp_two_jobs_one_machine() {
        let inst = generate_jsp(2, 1, 3).unwrap();
        assert_eq!(inst.num_jobs(), 2);
        for job in inst.jobs() {
            assert_eq!(job.operations.len(), 1);
            assert_eq!(job.operations[0].eligible()[0].0, 0);
        }
    }

    #[test]
    fn jsp_processing_times_are_uniform_on_1_99() {
        // Monte-Carlo check against the uniform[1, 99] mean of 50.
        let mut sum = 0u64;
        let mut count = 0u64;
        let mut seed = 0;
        while count < 100_000 {
            let inst = generate_jsp(20, 10, 1000 + seed).unwrap();
            for job in inst.jobs() {
                for op in &job.operations {
                    sum += op.eligible()[0].1 as u64;
                    count += 1;
                }
            }
            seed += 1;
        }
        let mean = sum as f64 / count as f64;
        assert!((mean - 50.0).abs() < 1.0, "mean {mean} drifted from 50");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(generate_fjsp(0, 5, 1).is_err());
        assert!(generate_fjsp(5, 0, 1).is_err());
        assert!(generate_jsp(0, 1, 1).is_err());
        assert!(generate_jsp(1, 0, 1).is_err());
    }

    #[test]
    fn empty_job_is_rejected_at_construction() {
        let jobs = vec![Job { operations: vec![] }];
        assert!(Instance::new(2, jobs).is_err());
    }

    #[test]
    fn parse_two_job_fixture_exactly() {
        let text = "2 2 1.5\n2 2 1 3 2 5 1 2 4\n1 1 1 2\n";
        let inst = parse_standard_fjsp(text).unwrap();
        assert_eq!(inst.num_jobs(), 2);
        assert_eq!(inst.num_machines(), 2);
        assert_eq!(inst.operation(0, 0).eligible(), &[(0, 3), (1, 5)]);
        assert_eq!(inst.operation(0, 1).eligible(), &[(1, 4)]);
        assert_eq!(inst.operation(1, 0).eligible(), &[(0, 2)]);
        assert_eq!(inst.kind(), Kind::Fjsp);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        // Truncated job line.
        let err = parse_standard_fjsp("1 2\n2 1 1 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        // Machine index out of range.
        let err = parse_standard_fjsp("1 2\n1 1 3 4\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        // Non-positive processing time.
        let err = parse_standard_fjsp("1 2\n1 1 1 0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tiny1_serializes_to_golden_text() {
        // Golden generated once from this serializer, checked thereafter.
        let golden = "2 2 1.5000\n2 2 1 3 2 5 1 2 4\n2 1 1 2 2 1 3 2 1\n";
        assert_eq!(serialize(&crate::fixtures::tiny1()), golden);
    }

    #[test]
    fn fjsp_round_trip_identity() {
        let inst = generate_fjsp(6, 4, 42).unwrap();
        let text = serialize(&inst);
        let reparsed = parse_standard_fjsp(&text).unwrap();
        assert_eq!(inst, reparsed);
        // Idempotent canonical form.
        assert_eq!(text, serialize(&reparsed));
    }

    #[test]
    fn jsp_round_trips_through_canonical_format() {
        let inst = generate_jsp(4, 3, 9).unwrap();
        let reparsed = parse_standard_fjsp(&serialize(&inst)).unwrap();
        assert_eq!(inst, reparsed);
        assert_eq!(reparsed.kind(), Kind::Jsp);
    }

    #[test]
    fn taillard_parse_minimal_and_round_trip() {
        let inst = parse_taillard_jsp("1 1\n0 7\n").unwrap();
        assert_eq!(inst.num_jobs(), 1);
        assert_eq!(inst.operation(0, 0).eligible(), &[(0, 7)]);

        let gen = generate_jsp(5, 4, 17).unwrap();
        let text = serialize_taillard_jsp(&gen).unwrap();
        let reparsed = parse_taillard_jsp(&text).unwrap();
        assert_eq!(gen, reparsed);
        assert_eq!(text, serialize_taillard_jsp(&reparsed).unwrap());
    }

    #[test]
    fn taillard_rejects_non_permutation_rows() {
        let err = parse_taillard_jsp("1 2\n0 5 0 6\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        // Dimension mismatch: three jobs promised, two given.
        assert!(parse_taillard_jsp("3 1\n0 5\n0 6\n").is_err());
    }

    #[test]
    fn taillard_one_based_offset() {
        let inst = parse_taillard_jsp_with_base("1 2\n1 5 2 6\n", 1).unwrap();
        assert_eq!(inst.operation(0, 0).eligible(), &[(0, 5)]);
        assert_eq!(inst.operation(0, 1).eligible(), &[(1, 6)]);
    }

    #[test]
    fn flat_indexing_round_trips() {
        let inst = generate_fjsp(5, 3, 2).unwrap();
        for flat in 0..inst.num_ops() {
            let (job, pos) = inst.op_at(flat);
            assert_eq!(inst.flat_index(job, pos), flat);
        }
    }
}
