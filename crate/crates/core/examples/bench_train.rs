// Quick wall-clock probe for the training loop at smoke-test scale.
use schedq::dataset::{build_dataset, BuildConfig, Recipe};
use schedq::instance::generate_fjsp;
use schedq::trainer::{train, TrainConfig};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let instances: Vec<_> = (0..20)
        .map(|i| Arc::new(generate_fjsp(4, 2, 1000 + i).unwrap()))
        .collect();
    let mut bcfg = BuildConfig::new(Recipe::Random, 1);
    bcfg.random_rollouts = 50;
    let t0 = Instant::now();
    let ds = build_dataset(&instances, &bcfg).unwrap();
    println!(
        "dataset: {} trajectories, {} transitions in {:.2}s",
        ds.manifest.num_trajectories,
        ds.manifest.num_transitions,
        t0.elapsed().as_secs_f64()
    );
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 64,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (_, log) = train(&ds, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "50 steps in {:.2}s -> {:.1} ms/step; mean critic loss {:.3}",
        dt,
        dt / 50.0 * 1e3,
        log.iter().map(|r| r.critic_loss).sum::<f64>() / log.len() as f64
    );
}
