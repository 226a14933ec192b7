//! Named parameter tensors with gradient accumulators and optimizer state.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Gradient update rule applied by [`ParamStore::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Entry {
    value: Tensor,
    grad: Vec<f64>,
    // Adam accumulators and per-parameter step counter.
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Flat store of named parameters. Every parameter has a same-shaped
/// gradient slot; gradients are zeroed when the parameter is stepped.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.entries.len();
        let n = value.len();
        self.entries.push(Entry {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        });
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Overwrite a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::ParamShapeMismatch {
                name: self.names[id.0].clone(),
                expected: alloc::format!("{:?}", entry.value.shape()),
                got: alloc::format!("{:?}", value.shape()),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(entry.grad.len(), grad.len());
        for (g, d) in entry.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.iter_mut() {
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Parameters in insertion order (the checkpoint order).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.entries.iter().map(|e| &e.value))
    }

    /// Apply one optimizer update to every parameter, then zero all
    /// gradients. SGD: theta <- theta - lr * grad.
    pub fn step(&mut self, opt: &Optimizer, lr: f64) -> Result<()> {
        self.step_prefixes(opt, lr, &[""])
    }

    /// Apply one optimizer update to parameters whose name starts with any
    /// of `prefixes`; their gradients are zeroed afterwards. Other
    /// parameters (and their gradients and optimizer state) are untouched.
    pub fn step_prefixes(&mut self, opt: &Optimizer, lr: f64, prefixes: &[&str]) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (name, entry) in self.names.iter().zip(self.entries.iter_mut()) {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            entry.steps += 1;
            let mut data = entry.value.data().to_vec();
            match *opt {
                Optimizer::Sgd => {
                    for (x, g) in data.iter_mut().zip(&entry.grad) {
                        *x -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = entry.steps as i32;
                    let bc1 = 1.0 - libm::pow(beta1, t as f64);
                    let bc2 = 1.0 - libm::pow(beta2, t as f64);
                    for i in 0..data.len() {
                        let g = entry.grad[i];
                        entry.m[i] = beta1 * entry.m[i] + (1.0 - beta1) * g;
                        entry.v[i] = beta2 * entry.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = entry.m[i] / bc1;
                        let v_hat = entry.v[i] / bc2;
                        data[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                    }
                }
            }
            let shape = entry.value.shape().to_vec();
            entry.value = Tensor::new(shape, data)?;
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    /// Soft update: for every parameter named `{from_prefix}{rest}`, set
    /// `{to_prefix}{rest} <- tau * from + (1 - tau) * to`. tau = 1 copies.
    pub fn soft_update(&mut self, from_prefix: &str, to_prefix: &str, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "tau must be in (0, 1], got {tau}"
            )));
        }
        let pairs: Vec<(usize, usize)> = self
            .names
            .iter()
            .enumerate()
            .filter_map(|(i, name)| {
                let rest = name.strip_prefix(from_prefix)?;
                let target = alloc::format!("{to_prefix}{rest}");
                self.index.get(&target).map(|&j| (i, j))
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::UnknownParam(from_prefix.to_string()));
        }
        for (src, dst) in pairs {
            if self.entries[src].value.shape() != self.entries[dst].value.shape() {
                return Err(Error::ParamShapeMismatch {
                    name: self.names[dst].clone(),
                    expected: alloc::format!("{:?}", self.entries[src].value.shape()),
                    got: alloc::format!("{:?}", self.entries[dst].value.shape()),
                });
            }
            let blended: Vec<f64> = self.entries[src]
                .value
                .data()
                .iter()
                .zip(self.entries[dst].value.data())
                .map(|(o, t)| tau * o + (1.0 - tau) * t)
                .collect();
            let shape = self.entries[dst].value.shape().to_vec();
            self.entries[dst].value = Tensor::new(shape, blended)?;
        }
        Ok(())
    }

    /// L2 norms by name, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), crate::tensor::l2_norm(t.data())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn store_with(name: &str, data: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add(name, Tensor::vector(data).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn duplicate_name_rejected() {
        let (mut store, _) = store_with("w", vec![1.0]);
        assert!(store.add("w", Tensor::vector(vec![2.0]).unwrap()).is_err());
    }

    #[test]
    fn sgd_step_zero_grad_leaves_params() {
        let (mut store, id) = store_with("w", vec![1.0, -2.0]);
        store.step(&Optimizer::Sgd, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_step_basic_update() {
        let (mut store, id) = store_with("w", vec![1.0]);
        store.accumulate_grad(id, &[1.0]);
        store.step(&Optimizer::Sgd, 0.1).unwrap();
        assert_relative_eq!(store.value(id).data()[0], 0.9, epsilon = 1e-15);
        assert_eq!(store.grad(id), &[0.0]);
    }

    #[test]
    fn lr_must_be_positive() {
        let (mut store, _) = store_with("w", vec![1.0]);
        assert!(store.step(&Optimizer::Sgd, 0.0).is_err());
        assert!(store.step(&Optimizer::Sgd, -0.5).is_err());
    }

    #[test]
    fn repeated_sgd_on_quadratic_contracts_monotonically() {
        // loss = 0.5 * ||theta||^2, grad = theta
        let (mut store, id) = store_with("w", vec![3.0, -4.0]);
        let mut prev = crate::tensor::l2_norm(store.value(id).data());
        for _ in 0..20 {
            let g = store.value(id).data().to_vec();
            store.accumulate_grad(id, &g);
            store.step(&Optimizer::Sgd, 0.1).unwrap();
            let norm = crate::tensor::l2_norm(store.value(id).data());
            assert!(norm < prev);
            prev = norm;
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let (mut store, id) = store_with("w", vec![1.0]);
        store.accumulate_grad(id, &[2.0]);
        store.step(&Optimizer::adam(), 0.01).unwrap();
        let v = store.value(id).data()[0];
        assert!(v < 1.0 && v > 0.98);
    }

    #[test]
    fn step_prefixes_only_touches_matches() {
        let mut store = ParamStore::new();
        let a = store.add("actor.w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let c = store.add("critic.w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        store.accumulate_grad(a, &[1.0]);
        store.accumulate_grad(c, &[1.0]);
        store.step_prefixes(&Optimizer::Sgd, 0.5, &["actor."]).unwrap();
        assert_eq!(store.value(a).data(), &[0.5]);
        assert_eq!(store.value(c).data(), &[1.0]);
        // critic grad is preserved until its own step
        assert_eq!(store.grad(c), &[1.0]);
    }

    #[test]
    fn soft_update_hard_copy_and_midpoint() {
        let mut store = ParamStore::new();
        let on = store.add("c.online.w", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let tg = store.add("c.target.w", Tensor::vector(vec![0.0]).unwrap()).unwrap();
        store.soft_update("c.online.", "c.target.", 0.5).unwrap();
        assert_eq!(store.value(tg).data(), &[1.0]);
        store.soft_update("c.online.", "c.target.", 1.0).unwrap();
        assert_eq!(store.value(tg).data(), store.value(on).data());
    }

    #[test]
    fn soft_update_converges_geometrically() {
        let mut store = ParamStore::new();
        store.add("c.online.w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let tg = store.add("c.target.w", Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let tau = 0.25;
        for k in 1..=10 {
            store.soft_update("c.online.", "c.target.", tau).unwrap();
            let expected = 1.0 - libm::pow(1.0 - tau, k as f64);
            assert_relative_eq!(store.value(tg).data()[0], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn soft_update_validates_inputs() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(store.soft_update("a.", "b.", 0.5).is_err());
        assert!(store.soft_update("a.", "a.", 0.0).is_err());
    }
}
