//! Named parameter storage and the AdamW optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Parameters keyed by dotted module path, iterated in key order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Array::all_finite)
    }

    /// Same keys and shapes as `other`, all zero.
    pub fn zeros_like(other: &ParamStore) -> Self {
        ParamStore {
            params: other
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Schema(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, value) in &self.params {
            let theirs = other.require(name)?;
            if theirs.shape() != value.shape() {
                return Err(Error::Schema(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    theirs.shape(),
                    value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self += other` over matching keys.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (name, value) in &mut self.params {
            if let Some(g) = other.params.get(name) {
                value.add_assign(g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.params.values_mut() {
            v.scale_in_place(k);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        AdamW {
            config,
            step: 0,
            m: ParamStore::zeros_like(params),
            v: ParamStore::zeros_like(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.m)?;
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.params[name].data();
            let m = self.m.params.get_mut(name).expect("checked").data_mut();
            let v = self.v.params.get_mut(name).expect("checked").data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}
