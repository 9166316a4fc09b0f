//! Named parameter storage, Adam, and Polyak target updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// A named table of parameter tensors with Adam moment buffers. BTreeMap
/// keeps iteration order stable, which keeps updates bit-reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Param {
    pub value: Tensor,
    #[serde(default)]
    m: Vec<f64>,
    #[serde(default)]
    v: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let len = value.len();
        self.params.insert(
            name.into(),
            Param {
                value,
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Plain value snapshot (no optimizer state), e.g. for target networks.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) {
        let p = self.params.get_mut(name).expect("unknown parameter");
        assert_eq!(p.value.len(), value.len());
        p.value = value;
    }

    pub fn iter_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}

/// One Adam update on a single parameter vector, with bias correction.
/// `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(value.len(), grad.len(), "gradient shape mismatch");
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..value.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a [`ParamStore`], applied to named gradients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Applies one step using `grads` (name -> flat gradient). Parameters
    /// without a gradient entry are left untouched. Optionally clips the
    /// global gradient norm first.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        clip_norm: Option<f64>,
    ) -> Result<()> {
        self.t += 1;
        let mut scale = 1.0;
        if let Some(max_norm) = clip_norm {
            let norm_sq: f64 = grads.values().flatten().map(|g| g * g).sum();
            let norm = norm_sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        for (name, grad) in grads {
            let param = store
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if grad.len() != param.value.len() {
                return Err(Error::Contract(format!(
                    "gradient shape mismatch for {name}: {} vs {}",
                    grad.len(),
                    param.value.len()
                )));
            }
            let scaled: Vec<f64> = grad.iter().map(|g| g * scale).collect();
            adam_step(
                &mut param.value.data,
                &scaled,
                &mut param.m,
                &mut param.v,
                self.t,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            );
        }
        Ok(())
    }
}

/// `target <- (1 - rho) * target + rho * online` over matching names.
pub fn polyak_update(target: &mut BTreeMap<String, Tensor>, online: &ParamStore, rho: f64) {
    for (name, tensor) in target.iter_mut() {
        let source = online.get(name).expect("target/online name mismatch");
        assert_eq!(source.len(), tensor.len());
        for (t, &o) in tensor.data.iter_mut().zip(&source.data) {
            *t = (1.0 - rho) * *t + rho * o;
        }
    }
}
