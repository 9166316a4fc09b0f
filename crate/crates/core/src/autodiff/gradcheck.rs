//! Finite-difference gradient checking for every primitive and for small
//! composites. Central differences with step `h = 1e-5`; relative error
//! `|a - b| / max(1, |a|, |b|)`.

// Index-based loops in the numeric kernels mirror the math.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Checks the analytic gradient of `f` (a scalar function of the inputs)
/// against central finite differences, element by element.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let build = |tensors: &[Tensor]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids);
        (g, ids, out)
    };

    let (mut g, ids, out) = build(inputs);
    assert_eq!(g.value(out).len(), 1, "gradcheck needs a scalar output");
    let grads = g.backward(out);
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| grads.get(&g, id)).collect();

    let mut max_err = 0.0f64;
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] += FD_STEP;
            let (gp, _, op) = build(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data[ei] -= FD_STEP;
            let (gm, _, om) = build(&minus);
            let fd = (gp.value(op).data[0] - gm.value(om).data[0]) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[ti][ei], fd));
        }
    }

    GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
}

/// Runs the full primitive suite at the given seed. Inputs are nudged away
/// from non-differentiable kinks so the finite-difference oracle is valid.
pub fn run_primitive_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 2);
    reports.push(check("matmul", &[a, b], |g, ids| {
        let c = g.matmul(ids[0], ids[1]);
        let s = g.sum_axis(c, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 2, 3);
    let b = rand_tensor(&mut rng, 2, 3);
    reports.push(check("add_mul_sub_neg", &[a, b], |g, ids| {
        let sum = g.add(ids[0], ids[1]);
        let prod = g.mul(sum, ids[1]);
        let diff = g.sub(prod, ids[0]);
        let n = g.neg(diff);
        let s = g.sum_axis(n, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 2, 2);
    let b = rand_tensor(&mut rng, 2, 3);
    reports.push(check("concat_cols", &[a, b], |g, ids| {
        let c = g.concat_cols(&[ids[0], ids[1]]);
        let w = g.constant(Tensor::new(5, 1, vec![0.3, -0.7, 1.1, 0.2, -0.4]));
        let y = g.matmul(c, w);
        let s = g.sum_axis(y, 0);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 2, 3);
    let b = rand_tensor(&mut rng, 1, 3);
    reports.push(check("concat_rows_gather", &[a, b], |g, ids| {
        let c = g.concat_rows(&[ids[0], ids[1]]);
        let picked = g.gather_rows(c, &[2, 0, 2]);
        let s = g.sum_axis(picked, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 3, 4);
    reports.push(check("mean_axes", &[a], |g, ids| {
        let m0 = g.mean_axis(ids[0], 0);
        let m1 = g.mean_axis(m0, 1);
        g.reshape(m1, 1, 1)
    }));

    // Keep the two operands separated so min() has no ties.
    let mut a = rand_tensor(&mut rng, 2, 3);
    let mut b = rand_tensor(&mut rng, 2, 3);
    for i in 0..a.len() {
        if (a.data[i] - b.data[i]).abs() < 0.05 {
            a.data[i] += 0.1;
            b.data[i] -= 0.1;
        }
    }
    reports.push(check("min_pair", &[a, b], |g, ids| {
        let m = g.min_pair(ids[0], ids[1]);
        let s = g.sum_axis(m, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 2, 4);
    let mask = vec![true, false, true, true, true, true, false, true];
    let mask2 = mask.clone();
    reports.push(check("softmax_masked", &[a], move |g, ids| {
        let y = g.softmax_masked_rows(ids[0], &mask);
        let w = g.constant(Tensor::new(2, 4, vec![0.9, -0.2, 0.4, 1.3, -0.8, 0.1, 0.6, -1.0]));
        let weighted = g.mul(y, w);
        let s = g.sum_axis(weighted, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 2, 4);
    reports.push(check("logsumexp_masked", &[a], move |g, ids| {
        let y = g.logsumexp_masked_rows(ids[0], &mask2);
        let s = g.sum_axis(y, 0);
        g.reshape(s, 1, 1)
    }));

    // log needs positive inputs.
    let mut a = rand_tensor(&mut rng, 2, 3);
    for v in &mut a.data {
        *v = v.abs() + 0.5;
    }
    reports.push(check("log_exp", &[a], |g, ids| {
        let l = g.log(ids[0]);
        let e = g.exp(l);
        let s = g.sum_axis(e, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    // Activations: keep inputs away from the kink at zero.
    let mut a = rand_tensor(&mut rng, 2, 4);
    for v in &mut a.data {
        if v.abs() < 0.05 {
            *v += 0.2;
        }
    }
    reports.push(check("leaky_relu", &[a.clone()], |g, ids| {
        let y = g.leaky_relu(ids[0], 0.01);
        let s = g.sum_axis(y, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));
    reports.push(check("elu", &[a], |g, ids| {
        let y = g.elu(ids[0], 1.0);
        let s = g.sum_axis(y, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 1, 3);
    reports.push(check("expand_rows", &[a], |g, ids| {
        let y = g.expand_rows(ids[0], 4);
        let w = g.constant(Tensor::new(
            4,
            3,
            (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect(),
        ));
        let weighted = g.mul(y, w);
        let s = g.sum_axis(weighted, 0);
        let s = g.sum_axis(s, 1);
        g.reshape(s, 1, 1)
    }));

    let a = rand_tensor(&mut rng, 3, 1);
    reports.push(check("expand_cols_reshape_scale", &[a], |g, ids| {
        let y = g.expand_cols(ids[0], 2);
        let r = g.reshape(y, 1, 6);
        let sc = g.scale(r, -0.7);
        let s = g.sum_axis(sc, 1);
        g.reshape(s, 1, 1)
    }));

    // Quantile Huber: keep |u| away from the kink at kappa and from 0.
    let pred = Tensor::new(1, 4, vec![0.3, -0.4, 1.6, 2.2]);
    let target = Tensor::new(1, 4, vec![-1.9, 0.75, 2.85, -0.62]);
    reports.push(check("quantile_huber", &[pred], move |g, ids| {
        g.quantile_huber(ids[0], target.clone(), 1.0)
    }));

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_finite_difference_check() {
        for report in run_primitive_suite(42) {
            assert!(
                report.max_rel_err < 1e-4,
                "{} failed gradcheck: {}",
                report.name,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn small_mlp_composite_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, 3, 4);
        let w1 = rand_tensor(&mut rng, 4, 5);
        let b1 = rand_tensor(&mut rng, 1, 5);
        let w2 = rand_tensor(&mut rng, 5, 1);
        let report = check("mlp", &[x, w1, b1, w2], |g, ids| {
            let h = g.matmul(ids[0], ids[1]);
            let rows = g.value(h).rows;
            let b = g.expand_rows(ids[2], rows);
            let h = g.add(h, b);
            let h = g.elu(h, 1.0);
            let y = g.matmul(h, ids[3]);
            let s = g.sum_axis(y, 0);
            g.reshape(s, 1, 1)
        });
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }
}
