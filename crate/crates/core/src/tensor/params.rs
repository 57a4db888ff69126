use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Stable identifier of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    velocity: Vec<f64>,
    frozen: bool,
}

/// Registry of trainable tensors. Each parameter has exactly one storage
/// slot no matter how many network branches read it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::InvalidArgument(format!("parameter {name:?} registered twice")));
        }
        let velocity = vec![0.0; value.numel()];
        self.entries.push(Entry {
            name,
            value: value.detached(),
            velocity,
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].value.grad()
    }

    pub fn velocity(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].velocity
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.entries[id.0].value.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
        }
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Replaces the values of every parameter named in `source`.
    /// Shapes must agree; unknown or missing names are errors.
    pub fn load_values<'a>(&mut self, source: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in source {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Data(format!("checkpoint has unknown parameter {name:?}")))?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != t.shape() {
                return Err(Error::shape(
                    "load_values",
                    format!("{name}: expected {:?}, checkpoint has {:?}", e.value.shape(), t.shape()),
                ));
            }
            e.value = t.detached();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "checkpoint is missing parameter {:?}",
                self.entries[i].name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step with momentum and L2 weight decay:
/// `v <- momentum*v + grad + wd*param`, `param <- param - lr*v`.
/// Frozen parameters are left untouched. Gradients are consumed (zeroed).
pub fn sgd_step(store: &mut ParamStore, cfg: SgdConfig) {
    for e in &mut store.entries {
        if e.frozen {
            e.value.zero_grad();
            continue;
        }
        let grad = e.value.grad().map(<[f64]>::to_vec);
        let data = e.value.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            e.velocity[i] = cfg.momentum * e.velocity[i] + g + cfg.weight_decay * data[i];
            data[i] -= cfg.lr * e.velocity[i];
        }
        e.value.zero_grad();
    }
}

/// Rescales the gradients of trainable parameters so their joint L2 norm is
/// at most `max_norm`. Returns the norm before rescaling.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .entries
        .iter()
        .filter(|e| !e.frozen)
        .filter_map(|e| e.value.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for e in store.entries.iter_mut().filter(|e| !e.frozen) {
            if e.value.grad().is_some() {
                e.value.grad_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
    }
    norm
}

/// Kaiming-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(value)).unwrap();
        store.accumulate_grad(id, &[grad]);
        (store, id)
    }

    #[test]
    fn plain_step() {
        let (mut store, id) = single(1.0, 1.0);
        sgd_step(
            &mut store,
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (mut store, id) = single(1.0, 1.0);
        sgd_step(&mut store, cfg);
        store.accumulate_grad(id, &[1.0]);
        sgd_step(&mut store, cfg);
        // v1 = 1, v2 = 0.9 + 1 = 1.9
        assert!((store.value(id).data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn pure_weight_decay() {
        let (mut store, id) = single(1.0, 0.0);
        sgd_step(
            &mut store,
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0005,
            },
        );
        assert!((store.value(id).data()[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut store, id) = single(1.0, 5.0);
        store.set_frozen(id, true);
        sgd_step(
            &mut store,
            SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.1,
            },
        );
        assert_eq!(store.value(id).data()[0], 1.0);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.register("w", Tensor::scalar(0.0)).is_err());
    }
}
