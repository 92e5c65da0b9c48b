//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Role};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `theta` in place, at step `t >= 1`.
pub fn adam_update<T: Real>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) -> Result<()> {
    let n = theta.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape("adam_step", &[n], &[grad.len(), m.len(), v.len()]));
    }
    if t == 0 {
        return Err(Error::invalid("adam_step", "step counter must be incremented before the update"));
    }
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let (c1, c2) = (f(1.0 - cfg.beta1.powi(t as i32)), f(1.0 - cfg.beta2.powi(t as i32)));
    let (lr, eps) = (f(cfg.learning_rate), f(cfg.eps));
    for i in 0..n {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state keyed by qualified parameter name (`<prefix>.<name>`).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Updates every trainable parameter of the unfrozen stores from its
    /// accumulated gradient, then clears the gradients.
    pub fn step(&mut self, stores: &mut [(&str, &mut ParamStore<T>)]) -> Result<()> {
        self.t += 1;
        for (prefix, store) in stores.iter_mut() {
            if store.is_frozen() {
                continue;
            }
            for (name, p) in store.iter_mut() {
                if p.role != Role::Trainable {
                    continue;
                }
                let Some(g) = p.value.grad().map(<[T]>::to_vec) else { continue };
                let key = format!("{prefix}.{name}");
                let n = g.len();
                let m = self.m.entry(key.clone()).or_insert_with(|| vec![T::zero(); n]);
                let v = self.v.entry(key).or_insert_with(|| vec![T::zero(); n]);
                adam_update(p.value.data_mut(), &g, m, v, self.t, &self.config)?;
            }
            store.zero_grads();
        }
        Ok(())
    }

    /// Moments as `adam.m.<key>` / `adam.v.<key>` tensors.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (tag, map) in [("m", &self.m), ("v", &self.v)] {
            for (k, data) in map {
                let t = Tensor::new(vec![data.len()], data.clone()).expect("non-empty moment");
                out.push((format!("adam.{tag}.{k}"), t));
            }
        }
        out
    }
}
