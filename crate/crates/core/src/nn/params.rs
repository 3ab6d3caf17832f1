//! Named parameter storage, ordered by name.

use std::collections::BTreeMap;

use super::{Gradients, Graph, NnError, Tensor, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Adds every parameter to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.entries.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect() }
    }

    /// Adds every parameter to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.entries.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect() }
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.values().map(|t| Tensor::zeros(t.raw_dim())).collect()
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars.get(name).copied().ok_or_else(|| NnError::Invalid(format!("missing parameter {name}")))
    }

    /// Gradients in name order; parameters the loss does not touch get zeros.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .values()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).raw_dim())))
            .collect()
    }
}
