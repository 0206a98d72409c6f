use std::collections::BTreeMap;

use crate::{shape_err, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return shape_err("param_store", format!("duplicate parameter {name:?}"));
        }
        let grad = vec![T::zero(); value.len()];
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        match self.entries.get_mut(name) {
            Some(p) if p.value.shape() == value.shape() => {
                p.value = value;
                Ok(())
            }
            Some(p) => shape_err("param_store", format!("{name}: {:?} -> {:?}", p.value.shape(), value.shape())),
            None => shape_err("param_store", format!("unknown parameter {name:?}")),
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.entries.get_mut(name) {
            p.trainable = trainable;
        }
    }

    /// Sets the trainable flag on every entry whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in &mut self.entries {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values, optionally restricted to trainable entries.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &[T]) -> Result<(), TensorError> {
        let Some(p) = self.entries.get_mut(name) else {
            return shape_err("param_store", format!("unknown parameter {name:?}"));
        };
        if p.grad.len() != grad.len() {
            return shape_err("param_store", format!("{name}: gradient of {} for {}", grad.len(), p.grad.len()));
        }
        for (a, &g) in p.grad.iter_mut().zip(grad) {
            *a = *a + g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        let c = T::of(c);
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * c);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.iter().map(|g| U::of(g.f64())).collect(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter().map(|(k, p)| (k, &p.value))
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }
}

/// `p -= lr * grad` on trainable entries, then every gradient is zeroed.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) {
    let lr = T::of(lr);
    for p in params.entries.values_mut() {
        if p.trainable {
            for (v, &g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                *v = *v - lr * g;
            }
        }
        p.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Base rate divided by 10 after every `decay_every` iterations.
pub fn lr_at(iteration: usize, base: f64, decay_every: usize) -> f64 {
    if decay_every == 0 {
        return base;
    }
    base / 10f64.powi((iteration / decay_every) as i32)
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates trainable entries, then zeroes every gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.entries.iter_mut() {
            if p.trainable {
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
                for (((x, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g.f64();
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    *x = T::of(x.f64() - upd);
                }
            }
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::filled(&[1], 1.0), true).unwrap();
        s.insert("b", Tensor::filled(&[1], 1.0), false).unwrap();
        s.accumulate("a", &[1.0]).unwrap();
        s.accumulate("b", &[1.0]).unwrap();
        s
    }

    #[test]
    fn sgd_updates_trainable_and_zeroes_grads() {
        let mut s = store();
        sgd_step(&mut s, 0.1);
        assert!((s.get("a").unwrap().value.item() - 0.9).abs() < 1e-7);
        assert_eq!(s.get("b").unwrap().value.item(), 1.0);
        assert_eq!(s.get("a").unwrap().grad, vec![0.0]);
        assert_eq!(s.get("b").unwrap().grad, vec![0.0]);
    }

    #[test]
    fn lr_decays_tenfold_per_period() {
        assert_eq!(lr_at(0, 0.001, 10_000), 0.001);
        assert_eq!(lr_at(9_999, 0.001, 10_000), 0.001);
        assert!((lr_at(10_000, 0.001, 10_000) - 0.0001).abs() < 1e-15);
        assert!((lr_at(20_000, 0.001, 10_000) - 0.00001).abs() < 1e-16);
    }

    #[test]
    fn two_decayed_sgd_steps_follow_the_schedule() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::filled(&[1], 0.0), true).unwrap();
        for it in [0, 10] {
            s.accumulate("p", &[1.0]).unwrap();
            sgd_step(&mut s, lr_at(it, 0.1, 10));
        }
        assert!((s.get("p").unwrap().value.item() + 0.11).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient_and_skips_frozen() {
        let mut s = store();
        let mut adam = Adam::new();
        adam.step(&mut s, 0.01);
        assert!((s.get("a").unwrap().value.item() - 0.99).abs() < 1e-6);
        assert_eq!(s.get("b").unwrap().value.item(), 1.0);
    }

    #[test]
    fn shapes_are_fixed() {
        let mut s = store();
        assert!(s.set_value("a", Tensor::zeros(&[2])).is_err());
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
    }
}
