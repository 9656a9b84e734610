use std::collections::{BTreeMap, HashMap};

use crate::error::{CftError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`]; stable for the lifetime of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S = f32> {
    id: String,
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    momentum: Option<Vec<S>>,
}

impl<S: Real> Parameter<S> {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<S> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn momentum(&self) -> Option<&[S]> {
        self.momentum.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered registry of trainable tensors. Iteration order is registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, id: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let id = id.into();
        if self.by_name.contains_key(&id) {
            return Err(CftError::contract(format!("duplicate parameter id {id:?}")));
        }
        let pid = ParamId(self.params.len());
        self.by_name.insert(id.clone(), pid);
        self.params.push(Parameter {
            id,
            value,
            grad: None,
            momentum: None,
        });
        Ok(pid)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, pid: ParamId) -> &Parameter<S> {
        &self.params[pid.0]
    }

    pub fn get_mut(&mut self, pid: ParamId) -> &mut Parameter<S> {
        &mut self.params[pid.0]
    }

    pub fn value(&self, pid: ParamId) -> &Tensor<S> {
        &self.params[pid.0].value
    }

    pub fn find(&self, id: &str) -> Option<ParamId> {
        self.by_name.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn set_value(&mut self, pid: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[pid.0];
        if p.value.shape() != value.shape() {
            return Err(CftError::dim(format!(
                "parameter {:?} has shape {:?}, got {:?}",
                p.id,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `grads` into the stored gradients. Parameters that the loss never
    /// reached receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let slot = p.grad.get_or_insert_with(|| vec![S::ZERO; p.value.len()]);
            if let Some(g) = grads.params.get(&ParamId(i)) {
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }

    /// SGD with momentum and L2 weight decay:
    /// `v <- momentum * v + (grad + weight_decay * w)`, `w <- w - lr * v`.
    /// Gradients are left in place.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(CftError::contract(format!(
                "parameter {:?} has no gradient; call backward first",
                p.id
            )));
        }
        let (lr, mu, wd) = (S::from_f64(lr), S::from_f64(momentum), S::from_f64(weight_decay));
        for p in &mut self.params {
            let grad = p.grad.as_ref().expect("checked above");
            let n = p.value.len();
            let buf = p.momentum.get_or_insert_with(|| vec![S::ZERO; n]);
            for ((w, v), &g) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Result of one backward sweep: gradients keyed by parameter, plus gradients
/// of any non-parameter leaves that were created with `requires_grad`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<S = f32> {
    pub(crate) params: BTreeMap<ParamId, Vec<S>>,
    pub(crate) leaves: BTreeMap<usize, Vec<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn param(&self, pid: ParamId) -> Option<&[S]> {
        self.params.get(&pid).map(Vec::as_slice)
    }

    pub fn leaf(&self, node: usize) -> Option<&[S]> {
        self.leaves.get(&node).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Elementwise sum; used to reduce per-sample gradients in a fixed order.
    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (k, v) in &other.params {
            match self.params.get_mut(k) {
                Some(dst) => {
                    for (d, &s) in dst.iter_mut().zip(v) {
                        *d += s;
                    }
                }
                None => {
                    self.params.insert(*k, v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for v in self.params.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x.to_f64() * x.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64, g: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let pid = s.register("w", Tensor::scalar(w)).unwrap();
        let mut grads = Gradients::default();
        grads.params.insert(pid, vec![g]);
        s.accumulate(&grads);
        (s, pid)
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.register("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let (mut s, pid) = store_with(1.5, 2.0);
        s.sgd_step(0.0, 0.9, 0.1).unwrap();
        assert_eq!(s.value(pid).item(), 1.5);
    }

    #[test]
    fn plain_gradient_step() {
        let (mut s, pid) = store_with(1.0, 2.0);
        s.sgd_step(0.1, 0.0, 0.0).unwrap();
        assert!((s.value(pid).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, pid) = store_with(0.0, 1.0);
        s.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert!((s.value(pid).item() + 0.1).abs() < 1e-15);
        s.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert!((s.value(pid).item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = ParamStore::<f32>::new();
        s.register("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(s.sgd_step(0.1, 0.0, 0.0), Err(CftError::Contract(_))));
    }

    #[test]
    fn accumulate_twice_adds() {
        let (mut s, pid) = store_with(0.0, 1.0);
        let mut g = Gradients::default();
        g.params.insert(pid, vec![2.5]);
        s.accumulate(&g);
        assert_eq!(s.get(pid).grad().unwrap(), &[3.5]);
    }
}
