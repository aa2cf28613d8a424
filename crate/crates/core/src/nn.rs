//! Parameter storage, deterministic initialization, and the AdamW
//! optimizer.
//!
//! Parameters live in a name-keyed store; each parameter's initial values
//! are drawn from an RNG stream derived from (seed, name), so two models
//! sharing a layer name and seed initialize that layer identically
//! regardless of construction order.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Gradients, Tape, TensorId};
use crate::seeding::stream_rng;

/// How to fill a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-bound, bound) with bound = 1/sqrt(fan_in).
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name-keyed parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Create a parameter, drawing its values from the (seed, name) stream.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} created twice"
        );
        let value = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = stream_rng(seed, &format!("param/{name}"));
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
            }
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::ones(IxDyn(shape)),
        };
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    pub fn insert_raw(&mut self, name: String, value: ArrayD<f64>) {
        self.params.insert(name, value);
    }
}

/// Parameters bound onto a tape for one forward/backward pass.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    /// Insert every parameter of `store` as a tape leaf.
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> BoundParams {
        let ids = store
            .iter()
            .map(|(name, value)| (name.to_string(), tape.leaf(value.clone())))
            .collect();
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collect per-parameter gradients (zero where a parameter did not
    /// participate in the graph).
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.ids
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(store.get(name).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    /// Conventional defaults with a caller-supplied learning rate.
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mm, g| *mm = self.beta1 * *mm + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |vv, g| *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g);

            let param = store.get_mut(name);
            // Decoupled weight decay.
            if self.weight_decay != 0.0 {
                param.mapv_inplace(|p| p - self.lr * self.weight_decay * p);
            }
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, mm, vv| {
                    let mhat = mm / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_order_independent() {
        let mut a = ParamStore::new();
        a.create("w1", &[4, 3], Init::KaimingUniform { fan_in: 3 }, 7);
        a.create("w2", &[2, 2], Init::KaimingUniform { fan_in: 2 }, 7);

        let mut b = ParamStore::new();
        b.create("w2", &[2, 2], Init::KaimingUniform { fan_in: 2 }, 7);
        b.create("w1", &[4, 3], Init::KaimingUniform { fan_in: 3 }, 7);

        assert_eq!(a.get("w1"), b.get("w1"));
        assert_eq!(a.get("w2"), b.get("w2"));
    }

    #[test]
    fn adamw_moves_toward_minimum() {
        let mut store = ParamStore::new();
        store.create("x", &[1], Init::Ones, 0);
        let mut opt = AdamW::new(0.1, 0.0);
        // Minimize (x - 3)^2.
        for _ in 0..500 {
            let x = store.get("x")[[0]];
            let mut grads = BTreeMap::new();
            grads.insert(
                "x".to_string(),
                ArrayD::from_elem(IxDyn(&[1]), 2.0 * (x - 3.0)),
            );
            opt.step(&mut store, &grads);
        }
        assert!((store.get("x")[[0]] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut store = ParamStore::new();
        store.create("x", &[1], Init::Ones, 0);
        let mut opt = AdamW::new(0.01, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), ArrayD::zeros(IxDyn(&[1])));
        opt.step(&mut store, &grads);
        let x = store.get("x")[[0]];
        assert!((x - (1.0 - 0.01 * 0.5)).abs() < 1e-12);
    }
}
