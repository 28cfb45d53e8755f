//! SGD with momentum and L2 weight decay.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `v ← momentum·v + grad + weight_decay·w; w ← w − lr·v`
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    registered: BTreeSet<String>,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(learning_rate: T, momentum: T, weight_decay: T) -> Result<Self> {
        if learning_rate < T::zero() || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {learning_rate}")));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if weight_decay < T::zero() {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            registered: BTreeSet::new(),
            velocity: BTreeMap::new(),
        })
    }

    /// Declares the parameters every step must update.
    pub fn register<'a>(&mut self, keys: impl IntoIterator<Item = &'a str>) {
        self.registered.extend(keys.into_iter().map(str::to_owned));
    }

    pub fn registered(&self) -> impl Iterator<Item = &str> {
        self.registered.iter().map(String::as_str)
    }

    pub fn velocity(&self, key: &str) -> Option<&Tensor<T>> {
        self.velocity.get(key)
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.clear();
    }

    /// Applies one update to every registered parameter and empties `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &mut ParamSet<T>) -> Result<()> {
        for key in &self.registered {
            if !grads.contains(key) {
                return Err(Error::Usage(format!("no gradient for registered parameter `{key}`")));
            }
            if !params.contains(key) {
                return Err(Error::Usage(format!("registered parameter `{key}` does not exist")));
            }
        }
        for key in &self.registered {
            let g = grads.require(key)?;
            let w = params.get_mut(key).expect("checked above");
            if g.shape() != w.shape() {
                return Err(Error::Dimension(format!(
                    "gradient of `{key}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            let v = self
                .velocity
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = self.momentum * *vi + *gi + self.weight_decay * *wi;
                *wi -= self.learning_rate * *vi;
            }
        }
        *grads = ParamSet::new();
        Ok(())
    }
}
