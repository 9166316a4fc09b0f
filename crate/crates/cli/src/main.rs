//! Command-line entry point wiring the full pipeline: instance generation,
//! dataset generation, heuristic solving, training, evaluation, dataset
//! analysis, and gradient checking.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use schedq::autodiff::gradcheck::run_primitive_suite;
use schedq::dataset::{self, BuildConfig, Recipe};
use schedq::eval::{benchmark_sweep, EvalMode, Method, UbTable};
use schedq::heuristics::{ga_solve, GaConfig, PdrPolicy, PdrSpec, RandomPolicy};
use schedq::instance::{parse_standard_fjsp, parse_taillard_jsp, serialize, Instance, Kind};
use schedq::sim::{rollout, validate};
use schedq::trainer::{train_with, PolicyBundle, TrainConfig};

#[derive(Parser)]
#[command(name = "schedq", version, about = "Offline RL toolkit for job-shop scheduling")]
struct Cli {
    /// Worker threads for instance-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random problem instances into a directory.
    GenInstances(GenInstancesArgs),
    /// Roll out behavior policies and store an offline transition dataset.
    GenDataset(GenDatasetArgs),
    /// Solve one instance with a heuristic and emit its schedule trace.
    Solve(SolveArgs),
    /// Train a policy bundle on a stored dataset.
    Train(TrainArgs),
    /// Evaluate a trained bundle (and optional reference heuristics).
    Eval(EvalArgs),
    /// Coverage and makespan-distribution analysis of stored datasets.
    AnalyzeDataset(AnalyzeArgs),
    /// Finite-difference checks of every autodiff primitive.
    Gradcheck,
}

#[derive(Args)]
struct GenInstancesArgs {
    /// Problem class: `fjsp` or `jsp`.
    #[arg(long)]
    kind: String,
    /// Number of jobs.
    #[arg(long)]
    n: usize,
    /// Number of machines.
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDatasetArgs {
    /// `pdr`, `ga`, `pdr-ga`, or `random`.
    #[arg(long)]
    recipe: String,
    /// Directory of instance files.
    #[arg(long)]
    instances: PathBuf,
    /// Random-recipe rollouts per instance.
    #[arg(long, default_value_t = 100)]
    per_instance: usize,
    #[arg(long, default_value_t = 200)]
    ga_population: usize,
    #[arg(long, default_value_t = 100)]
    ga_generations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// `pdr:<job>-<machine>` (e.g. `pdr:MWR-SPT`), `ga`, or `random`.
    #[arg(long)]
    method: String,
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trace output file; defaults to `<instance>.trace` next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen-dataset`.
    #[arg(long)]
    dataset: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_critic: Option<f64>,
    #[arg(long)]
    lr_actor: Option<f64>,
    #[arg(long)]
    alpha_cql: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    /// Actor update period in critic steps.
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    quantile: Option<bool>,
    #[arg(long)]
    dueling: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Bundle file written by `train`.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    /// Best-known makespans (`id makespan` lines) for gap reporting.
    #[arg(long)]
    ub: Option<PathBuf>,
    /// `greedy` or `sampling`.
    #[arg(long, default_value = "greedy")]
    mode: String,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Extra reference columns: `pdr:<rule>`, `ga`, `random` (repeatable).
    #[arg(long)]
    reference: Vec<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset to analyze.
    #[arg(long)]
    target: PathBuf,
    /// Reference dataset for the coverage ratio.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Optional directory for histogram data.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance record written next to every produced artifact.
#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    version: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    unix_timestamp: u64,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

fn manifest(
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        unix_timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    }
}

/// Parses one instance file. `.jsp` files use the interleaved job-shop
/// layout; everything else the standard flexible format.
fn load_instance(path: &Path) -> anyhow::Result<Instance> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let inst = if path.extension().and_then(|e| e.to_str()) == Some("jsp") {
        parse_taillard_jsp(&text)
    } else {
        parse_standard_fjsp(&text)
    }
    .with_context(|| format!("parsing {}", path.display()))?;
    Ok(inst)
}

const INSTANCE_EXTENSIONS: [&str; 4] = ["fjs", "fjsp", "jsp", "txt"];

/// Loads every instance file (`.fjs`, `.fjsp`, `.jsp`, `.txt`) in a
/// directory, sorted by file name.
fn load_instance_dir(dir: &Path) -> anyhow::Result<Vec<(String, Arc<Instance>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| INSTANCE_EXTENSIONS.contains(&e))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no instance files in {}", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("instance")
                .to_string();
            Ok((name, Arc::new(load_instance(&p)?)))
        })
        .collect()
}

fn cmd_gen_instances(args: GenInstancesArgs) -> anyhow::Result<()> {
    let kind = match args.kind.to_ascii_lowercase().as_str() {
        "fjsp" => Kind::Fjsp,
        "jsp" => Kind::Jsp,
        other => bail!("unknown kind `{other}` (expected fjsp or jsp)"),
    };
    std::fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    for i in 0..args.count {
        let seed = schedq::seeding::derive_seed(args.seed, 0, i as u64);
        let inst = match kind {
            Kind::Fjsp => schedq::instance::generate_fjsp(args.n, args.m, seed)?,
            Kind::Jsp => schedq::instance::generate_jsp(args.n, args.m, seed)?,
        };
        let path = args.out.join(format!("inst_{i:04}.fjs"));
        std::fs::write(&path, serialize(&inst))?;
        outputs.push(path);
    }
    let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(
        &args.out,
        &manifest(
            "gen-instances",
            serde_json::json!({
                "kind": args.kind, "n": args.n, "m": args.m, "count": args.count,
            }),
            Some(args.seed),
            &[],
            &out_refs,
        ),
    )?;
    println!(
        "wrote {} {} instance(s) to {}",
        args.count,
        args.kind,
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_dataset(args: GenDatasetArgs) -> anyhow::Result<()> {
    let recipe: Recipe = args.recipe.parse()?;
    let named = load_instance_dir(&args.instances)?;
    let instances: Vec<Arc<Instance>> = named.iter().map(|(_, i)| Arc::clone(i)).collect();
    let mut cfg = BuildConfig::new(recipe, args.seed);
    cfg.random_rollouts = args.per_instance;
    cfg.ga = GaConfig {
        population_size: args.ga_population,
        generations: args.ga_generations,
        ..GaConfig::default()
    };
    let ds = dataset::build_dataset(&instances, &cfg)?;
    dataset::save(&ds, &args.out)?;
    write_manifest(
        &args.out,
        &manifest(
            "gen-dataset",
            serde_json::to_value(&cfg)?,
            Some(args.seed),
            &[args.instances.as_path()],
            &[args.out.as_path()],
        ),
    )?;
    println!(
        "dataset: {} instances, {} trajectories ({} generated), {} transitions -> {}",
        ds.manifest.num_instances,
        ds.manifest.num_trajectories,
        ds.manifest.dedup.generated,
        ds.manifest.num_transitions,
        args.out.display()
    );
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> anyhow::Result<()> {
    let instance = Arc::new(load_instance(&args.instance)?);
    let trace = if let Some(rule) = args.method.strip_prefix("pdr:") {
        let spec: PdrSpec = rule.parse()?;
        rollout(&instance, &mut PdrPolicy::new(spec))?
    } else {
        match args.method.as_str() {
            "ga" => {
                let cfg = GaConfig {
                    seed: args.seed,
                    ..GaConfig::default()
                };
                ga_solve(&instance, &cfg)?.best
            }
            "random" => rollout(&instance, &mut RandomPolicy::new(args.seed))?,
            other => bail!("unknown method `{other}` (expected pdr:<rule>, ga, or random)"),
        }
    };
    anyhow::ensure!(
        validate(&trace, &instance).is_empty(),
        "produced trace failed validation"
    );
    // Default next to the working directory, never into the input directory.
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args
            .instance
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("solution");
        PathBuf::from(format!("{stem}.trace"))
    });
    std::fs::write(&out, trace.to_lines())?;
    // Single-file artifact: the provenance record sits beside the trace
    // under its own name so repeated solves never clobber each other.
    let manifest_path = PathBuf::from(format!("{}.manifest.json", out.display()));
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest(
            "solve",
            serde_json::json!({ "method": args.method }),
            Some(args.seed),
            &[args.instance.as_path()],
            &[out.as_path()],
        ))?,
    )?;
    println!("makespan {} trace {}", trace.makespan, out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => TrainConfig::default(),
    };
    // Flags override the config file, which overrides the defaults.
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr_critic {
        cfg.lr_critic = v;
    }
    if let Some(v) = args.lr_actor {
        cfg.lr_actor = v;
    }
    if let Some(v) = args.alpha_cql {
        cfg.alpha_cql = v;
    }
    if let Some(v) = args.entropy_coef {
        cfg.entropy_coef = v;
    }
    if let Some(v) = args.eta {
        cfg.policy_update_freq = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.quantile {
        cfg.quantile_on = v;
    }
    if let Some(v) = args.dueling {
        cfg.dueling_on = v;
    }
    if args.checkpoint_every.is_some() {
        cfg.checkpoint_every = args.checkpoint_every;
    }

    let ds = dataset::load(&args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt_dir = args.out.join("checkpoints");
    let bundle_path = args.out.join("bundle.json");
    let (bundle, log) = train_with(&ds, &cfg, |step, bundle| {
        if step == cfg.steps {
            return Ok(()); // final bundle written below
        }
        bundle.save(&ckpt_dir.join(format!("step_{step:08}.json")))
    })?;
    bundle.save(&bundle_path)?;

    let mut lines = String::new();
    for record in &log {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    let log_path = args.out.join("train_log.jsonl");
    std::fs::write(&log_path, lines)?;
    write_manifest(
        &args.out,
        &manifest(
            "train",
            serde_json::to_value(&cfg)?,
            Some(cfg.seed),
            &[args.dataset.as_path()],
            &[bundle_path.as_path(), log_path.as_path()],
        ),
    )?;
    let last = log.last().expect("at least one step");
    println!(
        "trained {} steps -> {} (final critic loss {:.4})",
        cfg.steps,
        bundle_path.display(),
        last.critic_loss
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let bundle = PolicyBundle::load(&args.bundle)?;
    let instances = load_instance_dir(&args.instances)?;
    let ub = match &args.ub {
        Some(path) => UbTable::load(path)?,
        None => UbTable::default(),
    };
    let mode = match args.mode.as_str() {
        "greedy" => EvalMode::Greedy,
        "sampling" => EvalMode::Sampling {
            k: args.k,
            repeats: args.repeats,
        },
        other => bail!("unknown mode `{other}` (expected greedy or sampling)"),
    };

    std::fs::create_dir_all(&args.out)?;
    let mut methods: Vec<Method> = vec![Method::Bundle(&bundle)];
    for reference in &args.reference {
        methods.push(match reference.as_str() {
            "ga" => Method::Ga(GaConfig::default()),
            "random" => Method::Random,
            other => match other.strip_prefix("pdr:") {
                Some(rule) => Method::Pdr(rule.parse()?),
                None => bail!("unknown reference `{other}`"),
            },
        });
    }

    let mut summaries = Vec::new();
    let mut outputs = Vec::new();
    for method in &methods {
        let report = benchmark_sweep(method, &instances, &ub, mode, args.seed)?;
        let label = report.method.replace([':', '-'], "_").to_lowercase();
        let path = args.out.join(format!("report_{label}.jsonl"));
        let mut lines = String::new();
        for row in &report.rows {
            lines.push_str(&serde_json::to_string(row)?);
            lines.push('\n');
        }
        std::fs::write(&path, lines)?;
        match report.mean_gap {
            Some(gap) => println!(
                "{}: mean gap {:.2}% (std {:.2}), mean time {:.3}s over {} instance(s)",
                report.method,
                gap,
                report.std_gap.unwrap_or(0.0),
                report.mean_wall_s,
                report.rows.len()
            ),
            None => println!(
                "{}: mean makespan {:.2}, mean time {:.3}s over {} instance(s) (no best-known table)",
                report.method,
                report.rows.iter().map(|r| r.makespan).sum::<f64>() / report.rows.len() as f64,
                report.mean_wall_s,
                report.rows.len()
            ),
        }
        summaries.push(report);
        outputs.push(path);
    }
    let summary_path = args.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summaries)?)?;
    outputs.push(summary_path);
    let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(
        &args.out,
        &manifest(
            "eval",
            serde_json::json!({ "mode": args.mode, "k": args.k, "repeats": args.repeats }),
            Some(args.seed),
            &[args.bundle.as_path(), args.instances.as_path()],
            &out_refs,
        ),
    )?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let target = dataset::load(&args.target)?;
    let reference = dataset::load(&args.reference)?;
    let ratio = dataset::saco(&target, &reference)?;
    println!(
        "coverage: target {} unique pairs, reference {}, ratio {:.4}",
        dataset::unique_state_actions(&target),
        dataset::unique_state_actions(&reference),
        ratio
    );
    let dists = dataset::makespan_histogram(&target);
    let all: Vec<f64> = dists.iter().flat_map(|d| d.normalized.clone()).collect();
    let bins = dataset::histogram_bins(&all, args.bins);
    println!(
        "normalized makespans: {} trajectories, IQR {:.4}",
        all.len(),
        dataset::iqr(&all)
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let hist_path = out.join("histogram.json");
        std::fs::write(
            &hist_path,
            serde_json::to_string_pretty(&serde_json::json!({
                "saco": ratio,
                "bins": bins,
                "per_instance": dists,
            }))?,
        )?;
        write_manifest(
            out,
            &manifest(
                "analyze-dataset",
                serde_json::json!({ "bins": args.bins }),
                None,
                &[args.target.as_path(), args.reference.as_path()],
                &[hist_path.as_path()],
            ),
        )?;
        println!("histogram -> {}", hist_path.display());
    }
    Ok(())
}

fn cmd_gradcheck() -> anyhow::Result<()> {
    const TOLERANCE: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    for report in run_primitive_suite(42) {
        println!("{:<28} max rel err {:.3e}", report.name, report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    if worst >= TOLERANCE {
        bail!("gradient check failed: worst relative error {worst:.3e} >= {TOLERANCE:e}");
    }
    println!("all primitives below {TOLERANCE:e}");
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok();
    }
    let result = match cli.command {
        Command::GenInstances(args) => cmd_gen_instances(args),
        Command::GenDataset(args) => cmd_gen_dataset(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AnalyzeDataset(args) => cmd_analyze(args),
        Command::Gradcheck => cmd_gradcheck(),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
