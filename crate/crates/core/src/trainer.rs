//! Offline actor-critic training: distributional quantile TD learning with a
//! conservative out-of-distribution penalty, delayed entropy-regularized
//! policy updates, and Polyak-averaged target networks.
//!
//! The critic optimizer owns the encoder and both quantile heads; the actor
//! head trains separately on detached embeddings, so no actor gradient
//! reaches critic parameters and no critic gradient reaches the target
//! network or the sampled next action.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, NodeId, ParamStore, Tensor};
use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::features::{apply_normalizer, NormStats};
use crate::nets::{
    actor_forward, actor_logits, critic_forward, encode, init_params, q_values, twin_min,
    BoundParams, NetConfig,
};

/// Training hyperparameters. Defaults follow the consolidated hyperparameter
/// table: 200k steps, batch 256, policy update every 4 critic steps,
/// conservative coefficient 0.05, entropy coefficient 0.005, target rate
/// 0.005, 64 quantiles, critic/actor learning rates 2e-4 / 2e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Actor update period in critic steps (the delay).
    pub policy_update_freq: usize,
    pub alpha_cql: f64,
    pub entropy_coef: f64,
    /// `true` (default): the entropy term rewards spread-out policies;
    /// `false`: it penalizes entropy instead.
    pub entropy_bonus: bool,
    /// Polyak rate for the target network.
    pub rho: f64,
    pub gamma: f64,
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub seed: u64,
    /// Distributional critic switch; off collapses to a single expected-value
    /// quantile.
    pub quantile_on: bool,
    /// Dueling aggregation switch; off routes pair inputs through one stream.
    pub dueling_on: bool,
    /// Compute targets as the policy expectation over next actions instead of
    /// sampling one.
    pub expectation_target: bool,
    pub grad_clip_norm: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200_000,
            batch_size: 256,
            policy_update_freq: 4,
            alpha_cql: 0.05,
            entropy_coef: 0.005,
            entropy_bonus: true,
            rho: 0.005,
            gamma: 1.0,
            lr_critic: 2e-4,
            lr_actor: 2e-5,
            seed: 1,
            quantile_on: true,
            dueling_on: true,
            expectation_target: false,
            grad_clip_norm: Some(10.0),
            checkpoint_every: None,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Architecture with the ablation switches applied.
    pub fn resolved_net(&self) -> NetConfig {
        let mut net = self.net.clone();
        if !self.quantile_on {
            net.num_quantiles = 1;
        }
        net.dueling = self.dueling_on;
        net
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "steps and batch size must be positive".into(),
            ));
        }
        if self.policy_update_freq == 0 {
            return Err(Error::InvalidParameter(
                "policy update frequency must be >= 1".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidParameter("rho must be in (0, 1]".into()));
        }
        if self.alpha_cql < 0.0 || self.entropy_coef < 0.0 {
            return Err(Error::InvalidParameter(
                "alpha and the entropy coefficient must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Trained parameters plus everything needed to run them: architecture,
/// config echo, normalization statistics, and the target snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub version: u32,
    pub config: TrainConfig,
    pub net: NetConfig,
    pub norm: NormStats,
    pub theta: ParamStore,
    pub psi: ParamStore,
    pub theta_target: BTreeMap<String, Tensor>,
}

pub const BUNDLE_VERSION: u32 = 1;

impl PolicyBundle {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyBundle> {
        let bundle: PolicyBundle = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported checkpoint version {}",
                bundle.version
            )));
        }
        Ok(bundle)
    }
}

/// One log record per critic step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub td_loss: f64,
    pub cql_loss: f64,
    pub critic_loss: f64,
    pub policy_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub q_data_mean: f64,
    pub wall_ms: f64,
}

/// Mean asymmetric quantile Huber loss over a batch of (predicted, target)
/// quantile rows. Exposed for oracle comparisons; the training loop runs the
/// same computation inside the graph.
pub fn quantile_huber_loss(pred: &[Vec<f64>], target: &[Vec<f64>], kappa: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch size mismatch");
    assert!(!pred.is_empty());
    let mut g = Graph::new();
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let pn = g.constant(Tensor::new(1, p.len(), p.clone()));
        let l = g.quantile_huber(pn, Tensor::new(1, t.len(), t.clone()), kappa);
        total += g.value(l).data[0];
    }
    total / pred.len() as f64
}

/// One state's conservative penalty for one critic head:
/// `logsumexp over legal actions of Q - Q(data action)`.
pub fn cql_term(q_per_action: &[f64], data_index: usize) -> f64 {
    assert!(data_index < q_per_action.len());
    let mut g = Graph::new();
    let q = g.constant(Tensor::new(1, q_per_action.len(), q_per_action.to_vec()));
    let mask = vec![true; q_per_action.len()];
    let lse = g.logsumexp_masked_rows(q, &mask);
    g.value(lse).data[0] - q_per_action[data_index]
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
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

/// Target quantile rows for a batch: `r` broadcast on terminal rows;
/// otherwise `r + gamma * min-head target quantiles at a'`, with `a'` drawn
/// from the current policy over the next state's legal actions (or the full
/// policy expectation when configured). No gradient flows into targets.
#[allow(clippy::too_many_arguments)]
pub fn td_targets(
    batch: &[&Transition],
    theta: &ParamStore,
    psi: &ParamStore,
    theta_target: &BTreeMap<String, Tensor>,
    net: &NetConfig,
    gamma: f64,
    expectation: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = net.num_quantiles;
    batch
        .iter()
        .map(|t| {
            let Some(next) = &t.next_frame else {
                return vec![t.reward as f64; n];
            };
            let mut g = Graph::new();
            // Next-action distribution under the live policy.
            let mut online = BoundParams::frozen(theta);
            let enc_online = encode(&mut g, &mut online, net, next);
            let mut actor = BoundParams::frozen(psi);
            let probs = actor_forward(&mut g, &mut actor, net, &enc_online);
            let probs = g.value(probs).data.clone();

            // Quantiles under the target critics.
            let mut target = BoundParams::frozen_values(theta_target);
            let enc_target = encode(&mut g, &mut target, net, next);
            let z1 = critic_forward(&mut g, &mut target, net, &enc_target, "q1");
            let z2 = critic_forward(&mut g, &mut target, net, &enc_target, "q2");
            let zmin = twin_min(&mut g, z1, z2);
            let zv = g.value(zmin);

            let r = t.reward as f64;
            if expectation {
                (0..n)
                    .map(|j| {
                        let exp: f64 = (0..zv.rows).map(|a| probs[a] * zv.at(a, j)).sum();
                        r + gamma * exp
                    })
                    .collect()
            } else {
                let a = sample_index(&probs, rng);
                (0..n).map(|j| r + gamma * zv.at(a, j)).collect()
            }
        })
        .collect()
}

struct CriticStep {
    td_loss: f64,
    cql_loss: f64,
    critic_loss: f64,
    q_data_mean: f64,
    grads: BTreeMap<String, Vec<f64>>,
}

/// Builds the critic loss graph for one batch and backpropagates:
/// `mean(td) + alpha * mean(cql)` with the TD and penalty terms summed over
/// the two heads.
fn critic_step(
    batch: &[&Transition],
    targets: &[Vec<f64>],
    theta: &ParamStore,
    net: &NetConfig,
    alpha: f64,
) -> CriticStep {
    let mut g = Graph::new();
    let mut bound = BoundParams::trainable(theta);
    let mut td_terms = Vec::with_capacity(batch.len());
    let mut cql_terms = Vec::with_capacity(batch.len());
    let mut q_data_sum = 0.0;

    for (t, target) in batch.iter().zip(targets) {
        let enc = encode(&mut g, &mut bound, net, &t.frame);
        let a = t.action_index as usize;
        let target_t = Tensor::new(1, target.len(), target.clone());
        let mut td: Option<NodeId> = None;
        let mut cql: Option<NodeId> = None;
        for head in ["q1", "q2"] {
            let z = critic_forward(&mut g, &mut bound, net, &enc, head);
            let picked = g.gather_rows(z, &[a]);
            let l = g.quantile_huber(picked, target_t.clone(), 1.0);
            td = Some(match td {
                Some(acc) => g.add(acc, l),
                None => l,
            });

            let q = q_values(&mut g, z); // [P, 1]
            let p = g.value(q).rows;
            let q_row = g.reshape(q, 1, p);
            let mask = vec![true; p];
            let lse = g.logsumexp_masked_rows(q_row, &mask); // [1, 1]
            let q_data = g.gather_rows(q, &[a]); // [1, 1]
            q_data_sum += g.value(q_data).data[0];
            let pen = g.sub(lse, q_data);
            cql = Some(match cql {
                Some(acc) => g.add(acc, pen),
                None => pen,
            });
        }
        td_terms.push(td.unwrap());
        cql_terms.push(cql.unwrap());
    }

    let td_stack = g.concat_rows(&td_terms);
    let td_mean = g.mean_axis(td_stack, 0);
    let cql_stack = g.concat_rows(&cql_terms);
    let cql_mean = g.mean_axis(cql_stack, 0);
    let penalty = g.scale(cql_mean, alpha);
    let loss = g.add(td_mean, penalty);

    let grads = g.backward(loss);
    CriticStep {
        td_loss: g.value(td_mean).data[0],
        cql_loss: g.value(cql_mean).data[0],
        critic_loss: g.value(loss).data[0],
        q_data_mean: q_data_sum / (2.0 * batch.len() as f64),
        grads: bound.collect_grads(&g, &grads),
    }
}

/// Loss components of one critic step.
#[derive(Debug, Clone, Copy)]
pub struct CriticLossParts {
    /// Mean quantile TD loss, summed over the two heads.
    pub td: f64,
    /// Mean conservative penalty before the `alpha` weighting, summed over
    /// the two heads.
    pub cql: f64,
    /// `td + alpha * cql`.
    pub total: f64,
}

/// Forward value and parameter gradients of the combined critic loss on a
/// batch, exposed so external checks (finite differences, structural
/// identities) can probe the same computation the training loop runs.
pub fn critic_loss_and_grads(
    batch: &[&Transition],
    targets: &[Vec<f64>],
    theta: &ParamStore,
    net: &NetConfig,
    alpha: f64,
) -> (CriticLossParts, BTreeMap<String, Vec<f64>>) {
    let step = critic_step(batch, targets, theta, net, alpha);
    (
        CriticLossParts {
            td: step.td_loss,
            cql: step.cql_loss,
            total: step.critic_loss,
        },
        step.grads,
    )
}

struct ActorStep {
    policy_loss: f64,
    entropy: f64,
    grads: BTreeMap<String, Vec<f64>>,
}

/// Builds the policy loss graph for one batch: the expected negative twin-min
/// action value under the policy plus the entropy term, critic frozen.
fn actor_step(
    batch: &[&Transition],
    theta: &ParamStore,
    psi: &ParamStore,
    net: &NetConfig,
    entropy_coef: f64,
    entropy_bonus: bool,
) -> ActorStep {
    let mut g = Graph::new();
    let mut critic = BoundParams::frozen(theta);
    let mut actor = BoundParams::trainable(psi);
    let mut loss_terms = Vec::with_capacity(batch.len());
    let mut entropy_sum = 0.0;

    for t in batch {
        let enc = encode(&mut g, &mut critic, net, &t.frame);
        let z1 = critic_forward(&mut g, &mut critic, net, &enc, "q1");
        let z2 = critic_forward(&mut g, &mut critic, net, &enc, "q2");
        let zmin = twin_min(&mut g, z1, z2);
        let q = q_values(&mut g, zmin); // [P, 1], constant w.r.t. psi
        let p = g.value(q).rows;
        let q_row = g.reshape(q, 1, p);

        // Log-probabilities via log-sum-exp keep the entropy finite even
        // when an action's probability underflows to zero.
        let logits = actor_logits(&mut g, &mut actor, net, &enc); // [1, P]
        let pairs = g.value(logits).cols;
        let mask = vec![true; pairs];
        let lse = g.logsumexp_masked_rows(logits, &mask); // [1, 1]
        let lse_row = g.expand_cols(lse, pairs);
        let logp = g.sub(logits, lse_row);
        let probs = g.exp(logp);

        let weighted = g.mul(q_row, probs);
        let q_pi = g.sum_axis(weighted, 1); // [1, 1]
        let neg_q_pi = g.neg(q_pi);

        let plogp = g.mul(probs, logp);
        let neg_h = g.sum_axis(plogp, 1); // [1, 1] = -H
        entropy_sum += -g.value(neg_h).data[0];
        // Bonus: minimize -lambda * H (push entropy up).
        // Penalty: minimize +lambda * H.
        let h_term = if entropy_bonus {
            g.scale(neg_h, entropy_coef)
        } else {
            g.scale(neg_h, -entropy_coef)
        };
        loss_terms.push(g.add(neg_q_pi, h_term));
    }

    let stack = g.concat_rows(&loss_terms);
    let mean = g.mean_axis(stack, 0);
    let grads = g.backward(mean);
    ActorStep {
        policy_loss: g.value(mean).data[0],
        entropy: entropy_sum / batch.len() as f64,
        grads: actor.collect_grads(&g, &grads),
    }
}

/// Runs the full training loop and returns the trained bundle plus the log.
/// `on_checkpoint` fires at the configured cadence and once at the end.
pub fn train_with<F>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<(PolicyBundle, Vec<TrainLogRecord>)>
where
    F: FnMut(usize, &PolicyBundle) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("dataset is empty".into()));
    }
    let net = cfg.resolved_net();
    let norm = dataset.manifest.norm.clone();

    // Normalize once up front; features are stored raw on disk.
    let normalized: Vec<Transition> = dataset
        .transitions
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.frame = apply_normalizer(&t.frame, &norm);
            t.next_frame = t.next_frame.as_ref().map(|f| apply_normalizer(f, &norm));
            t
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut theta, mut psi) = init_params(&net, crate::seeding::derive_seed(cfg.seed, 10, 0));
    let mut theta_target = theta.values();
    let mut adam_critic = Adam::new(cfg.lr_critic);
    let mut adam_actor = Adam::new(cfg.lr_actor);

    let make_bundle =
        |theta: &ParamStore, psi: &ParamStore, target: &BTreeMap<String, Tensor>| PolicyBundle {
            version: BUNDLE_VERSION,
            config: cfg.clone(),
            net: net.clone(),
            norm: norm.clone(),
            theta: theta.clone(),
            psi: psi.clone(),
            theta_target: target.clone(),
        };

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let start = Instant::now();
        let batch_size = cfg.batch_size.min(normalized.len());
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rng.gen_range(0..normalized.len()))
            .collect();
        let batch: Vec<&Transition> = idx.iter().map(|&i| &normalized[i]).collect();

        let targets = td_targets(
            &batch,
            &theta,
            &psi,
            &theta_target,
            &net,
            cfg.gamma,
            cfg.expectation_target,
            &mut rng,
        );
        let critic = critic_step(&batch, &targets, &theta, &net, cfg.alpha_cql);
        if !critic.critic_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "critic loss became non-finite at step {step} (td {}, cql {})",
                critic.td_loss, critic.cql_loss
            )));
        }
        adam_critic.step(&mut theta, &critic.grads, cfg.grad_clip_norm)?;

        let (mut policy_loss, mut entropy) = (None, None);
        if step % cfg.policy_update_freq == 0 {
            let actor = actor_step(
                &batch,
                &theta,
                &psi,
                &net,
                cfg.entropy_coef,
                cfg.entropy_bonus,
            );
            if !actor.policy_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "policy loss became non-finite at step {step}"
                )));
            }
            adam_actor.step(&mut psi, &actor.grads, cfg.grad_clip_norm)?;
            policy_loss = Some(actor.policy_loss);
            entropy = Some(actor.entropy);
        }

        crate::autodiff::polyak_update(&mut theta_target, &theta, cfg.rho);

        log.push(TrainLogRecord {
            step,
            td_loss: critic.td_loss,
            cql_loss: critic.cql_loss,
            critic_loss: critic.critic_loss,
            policy_loss,
            entropy,
            q_data_mean: critic.q_data_mean,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if let Some(every) = cfg.checkpoint_every {
            if step % every == 0 && step != cfg.steps {
                on_checkpoint(step, &make_bundle(&theta, &psi, &theta_target))?;
            }
        }
    }

    let bundle = make_bundle(&theta, &psi, &theta_target);
    on_checkpoint(cfg.steps, &bundle)?;
    Ok((bundle, log))
}

/// [`train_with`] without checkpoint callbacks.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(PolicyBundle, Vec<TrainLogRecord>)> {
    train_with(dataset, cfg, |_, _| Ok(()))
}
