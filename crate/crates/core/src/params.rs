//! Named parameter collections and their key namespaces.
//!
//! Keys are dotted paths whose first segment is the namespace:
//!
//! | namespace     | contents                                      | aggregated        |
//! |---------------|-----------------------------------------------|-------------------|
//! | `backbone`    | spatial weights, masks, temporal kernels, projection | yes        |
//! | `bn`          | batch-norm scale/shift and running statistics | yes, except FedBN |
//! | `im`          | inflected (shared) adjacency matrices         | yes               |
//! | `um`          | unique (private) adjacency matrices           | never             |
//! | `coef`        | ternary mixing coefficients α, β, γ           | never             |
//! | `classifier`  | local classification head                     | never             |

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Namespace {
    Backbone,
    BatchNorm,
    Inflected,
    Unique,
    Coefficient,
    Classifier,
}

impl Namespace {
    pub fn prefix(self) -> &'static str {
        match self {
            Namespace::Backbone => "backbone",
            Namespace::BatchNorm => "bn",
            Namespace::Inflected => "im",
            Namespace::Unique => "um",
            Namespace::Coefficient => "coef",
            Namespace::Classifier => "classifier",
        }
    }

    pub fn of_key(key: &str) -> Option<Self> {
        let head = key.split('.').next()?;
        [
            Namespace::Backbone,
            Namespace::BatchNorm,
            Namespace::Inflected,
            Namespace::Unique,
            Namespace::Coefficient,
            Namespace::Classifier,
        ]
        .into_iter()
        .find(|ns| ns.prefix() == head)
    }
}

/// Running batch-norm statistics are state, not trainable parameters.
pub fn is_running_stat(key: &str) -> bool {
    key.ends_with(".running_mean") || key.ends_with(".running_var")
}

pub fn is_unique_key(key: &str) -> bool {
    Namespace::of_key(key) == Some(Namespace::Unique)
}

/// Ordered map from parameter name to value. Iteration order is the sorted
/// key order, which fixes the order of every reduction over parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(key)
    }

    pub fn require(&self, key: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Usage(format!("missing parameter `{key}`")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor<T>> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Copy of the entries whose key satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites (or adds) every entry of `other`.
    pub fn overlay(&mut self, other: &ParamSet<T>) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every entry on `graph`: entries selected by `trainable`
    /// become gradient-accumulating leaves, the rest constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Parameter names bound to tape nodes.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, key: &str) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{key}` is not bound")))
    }

    pub fn get(&self, key: &str) -> Option<Var> {
        self.vars.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound leaf that received one.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>) -> ParamSet<T> {
        self.vars
            .iter()
            .filter_map(|(k, v)| graph.grad(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
