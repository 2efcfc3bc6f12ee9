use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Storage precision of parameter values. Arithmetic is always `f64`;
/// `F32` rounds values to single precision whenever they are written, so a
/// float32 checkpoint holds them exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn round(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Handle to a parameter of one particular store (and its clones).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

/// Ordered, named parameter collection. Order is registration order and
/// defines checkpoint layout. Clones share the identity of the original, so
/// ids stay valid across them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    precision: Precision,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.precision == other.precision
    }
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            precision,
        }
    }

    fn id(&self, index: usize) -> ParamId {
        ParamId {
            store: self.uid,
            index,
        }
    }

    fn slot(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.uid, "parameter id used with a foreign store");
        id.index
    }

    pub(crate) fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        self.precision.round(value.data_mut());
        let grad = vec![0.0; value.len()];
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        self.id(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[self.slot(id)]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        let uid = self.uid;
        (0..self.params.len()).map(move |index| ParamId { store: uid, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(|i| self.id(i))
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let i = self.slot(id);
        let p = &mut self.params[i];
        if value.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` is {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        self.precision.round(value.data_mut());
        p.value = value;
        Ok(())
    }

    /// Mutable access to raw values (no precision rounding).
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        let i = self.slot(id);
        self.params[i].value.data_mut()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let i = self.slot(id);
        self.params[i].frozen = frozen;
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let i = self.slot(id);
        let p = &mut self.params[i];
        if p.frozen {
            return;
        }
        for (d, v) in p.grad.iter_mut().zip(g) {
            *d += v;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Flat copy of every value in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every non-frozen parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if store.all_frozen() {
            return;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        while self.m.len() < store.params.len() {
            let len = store.params[self.m.len()].value.len();
            self.m.push(vec![0.0; len]);
            self.v.push(vec![0.0; len]);
        }
        let precision = store.precision;
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            precision.round(data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new(Precision::F64);
        let id = s.add("w", Tensor::from_vec(vec![1], vec![v]).unwrap());
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        s.params[0].grad[0] = 1.0;
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut s);
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(id).value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s);
        assert_eq!(s.get(id).value.item(), 0.7);
    }

    #[test]
    fn frozen_is_skipped() {
        let (mut s, id) = scalar_store(0.7);
        s.params[0].grad[0] = 3.0;
        s.set_frozen(id, true);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s);
        assert_eq!(s.get(id).value.item(), 0.7);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut s = ParamStore::new(Precision::F32);
        let id = s.add("w", Tensor::from_vec(vec![1], vec![0.1]).unwrap());
        assert_eq!(s.get(id).value.item(), 0.1f32 as f64);
    }
}
