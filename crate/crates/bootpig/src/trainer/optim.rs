//! AdamW with decoupled weight decay, plus global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::unet::ParamSet;

/// Scale all gradients by `max_norm / g` when the global L2 norm `g` exceeds
/// `max_norm`; returns the pre-clip norm. The norm is accumulated in f64 so
/// the result is independent of parameter ordering within f64 determinism.
pub fn clip_grad_norm(grads: &mut [(String, Vec<f32>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// AdamW: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
///
/// Moment state is keyed by parameter name (prefixed when several models
/// share one optimizer) and serializes losslessly for bitwise resume.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advance the shared step counter; call once per training step, before
    /// `apply` (which may run once per parameter group).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update `params` in place from `(prefixed name, gradient)` pairs; the
    /// prefix is stripped to find the parameter, kept to key the state.
    pub fn apply(
        &mut self,
        params: &mut ParamSet<f32>,
        prefix: &str,
        grads: &[(String, Vec<f32>)],
        lr: f64,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("AdamW::apply before begin_step".into()));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (key, g) in grads {
            let name = key.strip_prefix(prefix).ok_or_else(|| {
                Error::Config(format!("gradient key '{key}' lacks prefix '{prefix}'"))
            })?;
            let old = params.get(name)?.data.clone();
            if old.len() != g.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("{key}: gradient length {} vs parameter {}", g.len(), old.len()),
                ));
            }
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut new = Vec::with_capacity(old.len());
            for i in 0..old.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let theta = old[i] as f64;
                let update = lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta);
                new.push((theta - update) as f32);
            }
            params.set_data(name, new)?;
        }
        Ok(())
    }

    /// Flatten (t, m, v) into a parameter set under the `adam.` namespace.
    pub fn state_params(&self) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        out.insert("t", vec![1], vec![self.t as f32])?;
        for (key, m) in &self.m {
            out.insert(format!("m.{key}"), vec![m.len()], m.clone())?;
        }
        for (key, v) in &self.v {
            out.insert(format!("v.{key}"), vec![v.len()], v.clone())?;
        }
        Ok(out)
    }

    /// Restore state saved by `state_params`; an empty set resets to fresh.
    pub fn load_state(&mut self, ps: &ParamSet<f32>) -> Result<()> {
        self.t = 0;
        self.m.clear();
        self.v.clear();
        for (name, p) in ps.iter() {
            if name == "t" {
                self.t = p.data[0] as u64;
            } else if let Some(key) = name.strip_prefix("m.") {
                self.m.insert(key.to_string(), p.data.as_ref().clone());
            } else if let Some(key) = name.strip_prefix("v.") {
                self.v.insert(key.to_string(), p.data.as_ref().clone());
            } else {
                return Err(Error::Config(format!("unknown optimizer state entry '{name}'")));
            }
        }
        Ok(())
    }
}
