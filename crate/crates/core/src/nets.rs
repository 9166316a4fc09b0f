//! Network architecture: a two-stream attention encoder over operations and
//! machines, a global pooled embedding, an actor head over machine-operation
//! pairs, and twin dueling quantile critic heads.
//!
//! All forward passes are built on the [`crate::autodiff`] graph, so the same
//! code serves evaluation (constants) and training (parameter leaves).

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, ParamStore, Tensor};
use crate::features::{FeatureFrame, MACHINE_FEATURES, OP_FEATURES, PAIR_FEATURES};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Per-layer per-head output dimensions of the encoder; the last layer
    /// averages heads, earlier layers concatenate them.
    pub dan_dims: Vec<usize>,
    pub heads: usize,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    pub actor_hidden: usize,
    pub actor_layers: usize,
    pub num_quantiles: usize,
    pub dueling: bool,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            dan_dims: vec![32, 8],
            heads: 4,
            critic_hidden: 64,
            critic_layers: 2,
            actor_hidden: 64,
            actor_layers: 2,
            num_quantiles: 64,
            dueling: true,
            leaky_slope: 0.01,
        }
    }
}

impl NetConfig {
    /// Embedding width coming out of the encoder (per stream).
    pub fn embed_dim(&self) -> usize {
        *self.dan_dims.last().expect("at least one encoder layer")
    }

    /// Width of the global embedding: pooled ops concatenated with pooled machines.
    pub fn global_dim(&self) -> usize {
        2 * self.embed_dim()
    }

    /// Width of one pair input row: op, machine, raw pair features, global.
    pub fn pair_input_dim(&self) -> usize {
        2 * self.embed_dim() + PAIR_FEATURES + self.global_dim()
    }

    /// Quantile fractions `tau_i = (2i - 1) / 2N`, 1-based.
    pub fn taus(&self) -> Vec<f64> {
        let n = self.num_quantiles;
        (0..n).map(|i| (2 * i + 1) as f64 / (2 * n) as f64).collect()
    }
}

/// Binds named parameters into a graph, lazily, either as trainable leaves
/// (from a [`ParamStore`]) or as constants (from a value snapshot such as a
/// target network). Remembers node ids so gradients can be collected by name.
pub struct BoundParams<'a> {
    source: Source<'a>,
    ids: HashMap<String, NodeId>,
    trainable: bool,
}

enum Source<'a> {
    Store(&'a ParamStore),
    Values(&'a BTreeMap<String, Tensor>),
}

impl<'a> BoundParams<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        BoundParams {
            source: Source::Store(store),
            ids: HashMap::new(),
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        BoundParams {
            source: Source::Store(store),
            ids: HashMap::new(),
            trainable: false,
        }
    }

    pub fn frozen_values(values: &'a BTreeMap<String, Tensor>) -> Self {
        BoundParams {
            source: Source::Values(values),
            ids: HashMap::new(),
            trainable: false,
        }
    }

    fn get(&mut self, g: &mut Graph, name: &str) -> NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let tensor = match self.source {
            Source::Store(store) => store
                .get(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
                .clone(),
            Source::Values(values) => values
                .get(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
                .clone(),
        };
        let id = if self.trainable {
            g.param(tensor)
        } else {
            g.constant(tensor)
        };
        self.ids.insert(name.to_string(), id);
        id
    }

    /// Gradients for every bound parameter, keyed by name.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| (name.clone(), grads.get(g, id)))
            .collect()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
}

fn init_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize]) {
    for i in 0..dims.len() - 1 {
        store.insert(format!("{prefix}.w{i}"), xavier(rng, dims[i], dims[i + 1]));
        store.insert(format!("{prefix}.b{i}"), Tensor::zeros(1, dims[i + 1]));
    }
}

fn mlp_dims(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden, hidden_layers));
    dims.push(output);
    dims
}

/// Initializes the critic-side parameters (encoder plus both critic heads)
/// and the actor head, in two separate stores.
pub fn init_params(cfg: &NetConfig, seed: u64) -> (ParamStore, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = ParamStore::new();

    let mut op_in = OP_FEATURES;
    let mut mach_in = MACHINE_FEATURES;
    for (layer, &d) in cfg.dan_dims.iter().enumerate() {
        for head in 0..cfg.heads {
            theta.insert(format!("dan.op.l{layer}.h{head}.w"), xavier(&mut rng, op_in, d));
            theta.insert(format!("dan.op.l{layer}.h{head}.va"), xavier(&mut rng, d, 1));
            theta.insert(format!("dan.op.l{layer}.h{head}.vb"), xavier(&mut rng, d, 1));
            theta.insert(format!("dan.mach.l{layer}.h{head}.y"), xavier(&mut rng, mach_in, d));
            theta.insert(format!("dan.mach.l{layer}.h{head}.z"), xavier(&mut rng, op_in, d));
            theta.insert(format!("dan.mach.l{layer}.h{head}.s1"), xavier(&mut rng, d, 1));
            theta.insert(format!("dan.mach.l{layer}.h{head}.s2"), xavier(&mut rng, d, 1));
            theta.insert(format!("dan.mach.l{layer}.h{head}.s3"), xavier(&mut rng, d, 1));
        }
        let last = layer + 1 == cfg.dan_dims.len();
        let out = if last { d } else { d * cfg.heads };
        op_in = out;
        mach_in = out;
    }

    let n = cfg.num_quantiles;
    for head in ["q1", "q2"] {
        if cfg.dueling {
            init_mlp(
                &mut theta,
                &mut rng,
                &format!("{head}.value"),
                &mlp_dims(cfg.global_dim(), cfg.critic_hidden, cfg.critic_layers, n),
            );
            init_mlp(
                &mut theta,
                &mut rng,
                &format!("{head}.adv"),
                &mlp_dims(cfg.pair_input_dim(), cfg.critic_hidden, cfg.critic_layers, n),
            );
        } else {
            init_mlp(
                &mut theta,
                &mut rng,
                &format!("{head}.head"),
                &mlp_dims(cfg.pair_input_dim(), cfg.critic_hidden, cfg.critic_layers, n),
            );
        }
    }

    let mut psi = ParamStore::new();
    init_mlp(
        &mut psi,
        &mut rng,
        "actor",
        &mlp_dims(cfg.pair_input_dim(), cfg.actor_hidden, cfg.actor_layers, 1),
    );

    (theta, psi)
}

/// Encoder output: one embedding row per candidate operation and per machine,
/// the global embedding, and the per-action input rows for the heads.
pub struct EncodeOut {
    pub op_emb: NodeId,
    pub mach_emb: NodeId,
    pub h_g: NodeId,
    pub pair_inputs: NodeId,
}

/// Column picker: `x[:, k]` as `[r, 1]` via a constant selector.
fn col(g: &mut Graph, x: NodeId, k: usize, ncols: usize) -> NodeId {
    let mut e = vec![0.0; ncols];
    e[k] = 1.0;
    let sel = g.constant(Tensor::new(ncols, 1, e));
    g.matmul(x, sel)
}

fn mlp_forward(
    g: &mut Graph,
    params: &mut BoundParams,
    prefix: &str,
    mut x: NodeId,
    hidden_layers: usize,
) -> NodeId {
    for i in 0..=hidden_layers {
        let w = params.get(g, &format!("{prefix}.w{i}"));
        let b = params.get(g, &format!("{prefix}.b{i}"));
        let h = g.matmul(x, w);
        let rows = g.value(h).rows;
        let b = g.expand_rows(b, rows);
        x = g.add(h, b);
        if i < hidden_layers {
            x = g.elu(x, 1.0);
        }
    }
    x
}

/// One operation-attention block: each row attends over its in-frame
/// predecessor, itself, and its in-frame successor.
fn op_attention_layer(
    g: &mut Graph,
    params: &mut BoundParams,
    cfg: &NetConfig,
    frame: &FeatureFrame,
    x: NodeId,
    layer: usize,
) -> NodeId {
    let n = frame.op_rows.len();
    let row_of: HashMap<(usize, usize), usize> = frame
        .op_rows
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, i))
        .collect();
    let mut pred_idx = Vec::with_capacity(n);
    let mut succ_idx = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n * 3);
    for &(job, pos) in &frame.op_rows {
        let pred = pos.checked_sub(1).and_then(|p| row_of.get(&(job, p)));
        let succ = row_of.get(&(job, pos + 1));
        pred_idx.push(*pred.unwrap_or(&0));
        succ_idx.push(*succ.unwrap_or(&0));
        mask.push(pred.is_some());
        mask.push(true);
        mask.push(succ.is_some());
    }

    let d = cfg.dan_dims[layer];
    let last = layer + 1 == cfg.dan_dims.len();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let w = params.get(g, &format!("dan.op.l{layer}.h{head}.w"));
        let va = params.get(g, &format!("dan.op.l{layer}.h{head}.va"));
        let vb = params.get(g, &format!("dan.op.l{layer}.h{head}.vb"));
        let wh = g.matmul(x, w);
        let sa = g.matmul(wh, va);
        let sb = g.matmul(wh, vb);
        let sb_pred = g.gather_rows(sb, &pred_idx);
        let sb_succ = g.gather_rows(sb, &succ_idx);
        let col_pred = g.add(sa, sb_pred);
        let col_self = g.add(sa, sb);
        let col_succ = g.add(sa, sb_succ);
        let scores = g.concat_cols(&[col_pred, col_self, col_succ]);
        let scores = g.leaky_relu(scores, cfg.leaky_slope);
        let attn = g.softmax_masked_rows(scores, &mask);

        let wh_pred = g.gather_rows(wh, &pred_idx);
        let wh_succ = g.gather_rows(wh, &succ_idx);
        let mut out: Option<NodeId> = None;
        for (k, part) in [(0, wh_pred), (1, wh), (2, wh_succ)] {
            let a_col = col(g, attn, k, 3);
            let a_exp = g.expand_cols(a_col, d);
            let term = g.mul(a_exp, part);
            out = Some(match out {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        head_outs.push(g.elu(out.unwrap(), 1.0));
    }
    combine_heads(g, &head_outs, last)
}

/// One machine-attention block: machines attend over machines they share
/// candidate operations with, scored against the pooled shared-candidate
/// embedding; non-sharing pairs are masked to zero attention.
fn machine_attention_layer(
    g: &mut Graph,
    params: &mut BoundParams,
    cfg: &NetConfig,
    frame: &FeatureFrame,
    machines: NodeId,
    ops_in: NodeId,
    layer: usize,
) -> NodeId {
    let m = frame.mach_feats.len();
    let n = frame.op_rows.len();

    // Shared-candidate selector: row (y, z) averages the op rows eligible on
    // both machines. Adjacency masks pairs with no shared candidates.
    let mut sel = vec![0.0; m * m * n];
    let mut adj = vec![false; m * m];
    for y in 0..m {
        for z in 0..m {
            let shared: Vec<usize> = (0..n)
                .filter(|&o| {
                    frame.op_eligible[o].contains(&y) && frame.op_eligible[o].contains(&z)
                })
                .collect();
            if shared.is_empty() {
                continue;
            }
            adj[y * m + z] = true;
            let weight = 1.0 / shared.len() as f64;
            for &o in &shared {
                sel[(y * m + z) * n + o] = weight;
            }
        }
    }
    let sel = g.constant(Tensor::new(m * m, n, sel));
    let pooled = g.matmul(sel, ops_in);

    let last = layer + 1 == cfg.dan_dims.len();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let y_proj = params.get(g, &format!("dan.mach.l{layer}.h{head}.y"));
        let z_proj = params.get(g, &format!("dan.mach.l{layer}.h{head}.z"));
        let s1 = params.get(g, &format!("dan.mach.l{layer}.h{head}.s1"));
        let s2 = params.get(g, &format!("dan.mach.l{layer}.h{head}.s2"));
        let s3 = params.get(g, &format!("dan.mach.l{layer}.h{head}.s3"));

        let ym = g.matmul(machines, y_proj);
        let zp = g.matmul(pooled, z_proj);
        let sy = g.matmul(ym, s1); // [m, 1]
        let sz = g.matmul(ym, s2); // [m, 1]
        let sp = g.matmul(zp, s3); // [m*m, 1]

        let sy_mat = g.expand_cols(sy, m);
        let sz_row = g.reshape(sz, 1, m);
        let sz_mat = g.expand_rows(sz_row, m);
        let sp_mat = g.reshape(sp, m, m);
        let sum = g.add(sy_mat, sz_mat);
        let scores = g.add(sum, sp_mat);
        let scores = g.leaky_relu(scores, cfg.leaky_slope);
        let attn = g.softmax_masked_rows(scores, &adj);
        let out = g.matmul(attn, ym);
        head_outs.push(g.elu(out, 1.0));
    }
    combine_heads(g, &head_outs, last)
}

/// Concatenates head outputs, except on the last layer where they average.
fn combine_heads(g: &mut Graph, heads: &[NodeId], last: bool) -> NodeId {
    if last {
        let mut acc = heads[0];
        for &h in &heads[1..] {
            acc = g.add(acc, h);
        }
        g.scale(acc, 1.0 / heads.len() as f64)
    } else {
        g.concat_cols(heads)
    }
}

/// Full encoder pass over a (normalized) feature frame.
pub fn encode(
    g: &mut Graph,
    params: &mut BoundParams,
    cfg: &NetConfig,
    frame: &FeatureFrame,
) -> EncodeOut {
    assert!(!frame.pairs.is_empty(), "frame has no legal actions");
    let mut ops = g.constant(Tensor::from_rows(
        &frame.op_feats.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    ));
    let mut machines = g.constant(Tensor::from_rows(
        &frame.mach_feats.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    ));
    for layer in 0..cfg.dan_dims.len() {
        let next_machines = machine_attention_layer(g, params, cfg, frame, machines, ops, layer);
        let next_ops = op_attention_layer(g, params, cfg, frame, ops, layer);
        ops = next_ops;
        machines = next_machines;
    }

    let op_pool = g.mean_axis(ops, 0);
    let mach_pool = g.mean_axis(machines, 0);
    let h_g = g.concat_cols(&[op_pool, mach_pool]);

    let op_rows: Vec<usize> = frame.pairs.iter().map(|p| p.op_row).collect();
    let mach_rows: Vec<usize> = frame.pairs.iter().map(|p| p.machine).collect();
    let op_part = g.gather_rows(ops, &op_rows);
    let mach_part = g.gather_rows(machines, &mach_rows);
    let pf = g.constant(Tensor::from_rows(
        &frame.pair_feats.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    ));
    let hg_rep = g.expand_rows(h_g, frame.pairs.len());
    let pair_inputs = g.concat_cols(&[op_part, mach_part, pf, hg_rep]);

    EncodeOut {
        op_emb: ops,
        mach_emb: machines,
        h_g,
        pair_inputs,
    }
}

/// Actor distribution over the frame's legal actions: `[1, P]` probabilities.
pub fn actor_forward(
    g: &mut Graph,
    params: &mut BoundParams,
    cfg: &NetConfig,
    enc: &EncodeOut,
) -> NodeId {
    let row = actor_logits(g, params, cfg, enc);
    let p = g.value(row).cols;
    let mask = vec![true; p];
    g.softmax_masked_rows(row, &mask)
}

/// Raw actor scores per legal action, `[1, P]`.
pub fn actor_logits(
    g: &mut Graph,
    params: &mut BoundParams,
    cfg: &NetConfig,
    enc: &EncodeOut,
) -> NodeId {
    let logits = mlp_forward(g, params, "actor", enc.pair_inputs, cfg.actor_layers);
    let p = g.value(logits).rows;
    g.reshape(logits, 1, p)
}

/// One critic head's per-action quantile matrix `Z[P, N]`. With the dueling
/// architecture, `Z[a, j] = V[j] + A[a, j] - mean_a' A[a', j]`; otherwise a
/// single stream maps each pair input straight to its quantiles.
pub fn critic_forward(
    g: &mut Graph,
    params: &mut BoundParams,
    cfg: &NetConfig,
    enc: &EncodeOut,
    head: &str,
) -> NodeId {
    let p = g.value(enc.pair_inputs).rows;
    if cfg.dueling {
        let v = mlp_forward(g, params, &format!("{head}.value"), enc.h_g, cfg.critic_layers);
        let a = mlp_forward(
            g,
            params,
            &format!("{head}.adv"),
            enc.pair_inputs,
            cfg.critic_layers,
        );
        let a_mean = g.mean_axis(a, 0);
        let a_mean = g.expand_rows(a_mean, p);
        let centered = g.sub(a, a_mean);
        let v = g.expand_rows(v, p);
        g.add(v, centered)
    } else {
        mlp_forward(g, params, &format!("{head}.head"), enc.pair_inputs, cfg.critic_layers)
    }
}

/// Elementwise per-quantile minimum of the two heads.
pub fn twin_min(g: &mut Graph, z1: NodeId, z2: NodeId) -> NodeId {
    g.min_pair(z1, z2)
}

/// Scalar action values: the mean over quantiles, `[P, 1]`.
pub fn q_values(g: &mut Graph, z: NodeId) -> NodeId {
    g.mean_axis(z, 1)
}
