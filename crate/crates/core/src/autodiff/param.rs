use std::collections::BTreeMap;

use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensor together with its gradient accumulator and
/// momentum buffer. All three share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub momentum: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            momentum,
        }
    }
}

/// Named collection of parameters, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    names: Vec<String>,
    lookup: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            names: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId, AutodiffError> {
        if self.lookup.contains_key(name) {
            return Err(AutodiffError::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(value));
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Parameter<S>)> {
        self.params
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (p, n))| (ParamId(i), n.as_str(), p))
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// L2 norm over the gradient accumulators of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> S {
        ids.iter()
            .flat_map(|id| self.params[id.0].grad.data().iter())
            .fold(S::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[S]) -> Result<(), AutodiffError> {
        let p = self.params.get_mut(id.0).ok_or_else(|| {
            AutodiffError::Contract(format!("parameter id {} not in this store", id.0))
        })?;
        if p.grad.numel() != g.len() {
            return Err(AutodiffError::Contract(format!(
                "gradient for `{}` has {} values, parameter has {}",
                self.names[id.0],
                g.len(),
                p.grad.numel()
            )));
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }
}
