//! Named trainable tensors with gradient and optimizer state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Weight decay applies only when `decay` is set.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.slots.len());
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name: name.clone(),
            value,
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            decay,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.data.len()).sum()
    }

    pub fn grads_finite(&self) -> bool {
        self.slots.iter().all(|s| s.grad.is_finite())
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for s in &mut self.slots {
            let wd = if s.decay { cfg.weight_decay } else { 0.0 };
            for k in 0..s.value.data.len() {
                let g = s.grad.data[k];
                let m = cfg.beta1 * s.first_moment.data[k] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * s.second_moment.data[k] + (1.0 - cfg.beta2) * g * g;
                s.first_moment.data[k] = m;
                s.second_moment.data[k] = v;
                let p = &mut s.value.data[k];
                *p -= cfg.lr * wd * *p;
                *p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            }
        }
    }

    /// Values keyed by name, for checkpoints.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.value.clone()))
            .collect()
    }

    /// Overwrites every registered value from `named`; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        if named.len() != self.slots.len() {
            return Err(Error::Schema {
                field: "params".into(),
                message: format!("{} tensors for {} parameters", named.len(), self.slots.len()),
            });
        }
        for s in &mut self.slots {
            let t = named.get(&s.name).ok_or_else(|| Error::Schema {
                field: "params".into(),
                message: format!("missing {}", s.name),
            })?;
            if t.shape() != s.value.shape() || t.data.len() != t.rows * t.cols {
                return Err(Error::Schema {
                    field: format!("params.{}", s.name),
                    message: format!("shape {:?}, expected {:?}", t.shape(), s.value.shape()),
                });
            }
            s.value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = ParameterStore::new();
        let id = s.insert("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap(), true).unwrap();
        s.grad_mut(id).data.copy_from_slice(&[2.0, -3.0]);
        s.adam_step(&AdamConfig { lr: 0.1, ..Default::default() });
        let v = &s.value(id).data;
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
        assert!(s.insert("w", Tensor::zeros(1, 1), false).is_err());
    }

    #[test]
    fn named_round_trip_checks_shapes() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(2, 2), true).unwrap();
        let mut named = s.to_named();
        named.get_mut("a").unwrap().data[3] = 5.0;
        s.load_named(&named).unwrap();
        assert_eq!(s.get("a").unwrap().get(1, 1), 5.0);
        named.insert("a".into(), Tensor::zeros(1, 4));
        assert!(s.load_named(&named).is_err());
    }
}
