//! Named parameter storage with Adam state. Registration order is the
//! canonical ordering everywhere (checkpoints, fingerprints, updates), which
//! keeps whole-run byte determinism trivial.

use std::collections::BTreeMap;

use ndarray::Array4;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array4<f64>,
    pub grad: Array4<f64>,
    m: Array4<f64>,
    v: Array4<f64>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

/// How a tensor is filled at registration time.
pub enum Init<'a> {
    /// Uniform in [-s, s] with s = sqrt(1/fan_in).
    FanIn { fan_in: usize, rng: &'a mut dyn rand::RngCore },
    Zero,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: (usize, usize, usize, usize), init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zero => Array4::zeros(shape),
            Init::FanIn { fan_in, rng } => {
                let s = (1.0 / fan_in.max(1) as f64).sqrt();
                let mut a = Array4::zeros(shape);
                for v in a.iter_mut() {
                    *v = rng.gen_range(-s..s);
                }
                a
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            grad: Array4::zeros(value.raw_dim()),
            m: Array4::zeros(value.raw_dim()),
            v: Array4::zeros(value.raw_dim()),
            step: 0,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: ParamId) -> &Array4<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array4<f64> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array4<f64> {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Array4<f64>) {
        self.entries[id.0].grad += g;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Scale filtered gradients so their global L2 norm is at most
    /// `max_norm`; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64, filter: impl Fn(&str) -> bool) -> f64 {
        let mut sumsq = 0.0;
        for e in &self.entries {
            if !filter(&e.name) {
                continue;
            }
            for &g in e.grad.iter() {
                sumsq += g * g;
            }
        }
        let norm = sumsq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for e in &mut self.entries {
                if !filter(&e.name) {
                    continue;
                }
                e.grad.mapv_inplace(|g| g * scale);
            }
        }
        norm
    }

    /// One Adam step over every parameter whose name passes `filter`.
    /// Bias correction uses a per-parameter step counter so branches that
    /// update on alternating steps stay correctly corrected.
    pub fn adam_step(&mut self, cfg: &AdamConfig, lr: f64, filter: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            if !filter(&e.name) {
                continue;
            }
            e.step += 1;
            let b1 = cfg.beta1;
            let b2 = cfg.beta2;
            let bc1 = 1.0 - b1.powi(e.step as i32);
            let bc2 = 1.0 - b2.powi(e.step as i32);
            ndarray::Zip::from(&mut e.value)
                .and(&mut e.m)
                .and(&mut e.v)
                .and(&e.grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + cfg.eps);
                });
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    pub fn grads_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.grad.iter().all(|v| v.is_finite()))
    }

    /// Clear Adam state (m, v, per-param step counters). Each training stage
    /// starts from a clean optimizer so in-process chaining matches running
    /// the stages as separate commands.
    pub fn reset_optimizer(&mut self) {
        for e in &mut self.entries {
            e.m.fill(0.0);
            e.v.fill(0.0);
            e.step = 0;
        }
    }

    /// SHA-256 over parameter names and value bytes, in registration order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Fingerprint restricted to names passing the filter.
    pub fn fingerprint_filtered(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            if !filter(&e.name) {
                continue;
            }
            h.update(e.name.as_bytes());
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Overwrite values from (name, array) pairs; shapes must match.
    pub fn load_values(&mut self, values: &BTreeMap<String, Array4<f64>>) -> Result<()> {
        for (name, arr) in values {
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            if self.entries[id.0].value.raw_dim() != arr.raw_dim() {
                return Err(Error::shape(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    arr.shape(),
                    self.entries[id.0].value.shape()
                )));
            }
            self.entries[id.0].value.assign(arr);
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_single_step_matches_hand_arithmetic() {
        let mut store = ParamStore::new();
        let id = store.register("p", (1, 1, 1, 1), Init::Zero);
        store.entries[id.0].grad.fill(1.0);
        let cfg = AdamConfig::default();
        store.adam_step(&cfg, 1e-4, |_| true);
        // Bias-corrected first step: m_hat = v_hat = 1, delta = -lr / (1 + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        let got = store.value(id)[[0, 0, 0, 0]];
        assert!((got - expected).abs() < 1e-15);
        assert!((got + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn filter_freezes_other_params() {
        let mut rng = crate::rng::stream(0, "t", 0);
        let mut store = ParamStore::new();
        let a = store.register("net_a.w", (2, 2, 1, 1), Init::FanIn { fan_in: 2, rng: &mut rng });
        let b = store.register("net_b.w", (2, 2, 1, 1), Init::FanIn { fan_in: 2, rng: &mut rng });
        store.entries[a.0].grad.fill(1.0);
        store.entries[b.0].grad.fill(1.0);
        let before_a = store.value(a).clone();
        let before_b = store.value(b).clone();
        store.adam_step(&AdamConfig::default(), 1e-2, |n| n.starts_with("net_a"));
        assert_ne!(store.value(a), &before_a);
        assert_eq!(store.value(b), &before_b);
    }

    #[test]
    fn fingerprint_changes_with_values() {
        let mut rng = crate::rng::stream(1, "t", 0);
        let mut store = ParamStore::new();
        let id = store.register("w", (1, 1, 1, 1), Init::FanIn { fan_in: 1, rng: &mut rng });
        let f1 = store.fingerprint();
        store.value_mut(id)[[0, 0, 0, 0]] += 1.0;
        assert_ne!(f1, store.fingerprint());
    }
}
