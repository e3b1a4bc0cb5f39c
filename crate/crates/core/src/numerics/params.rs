use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};

use super::{Scalar, Tensor};

/// Named trainable tensors plus the set of names excluded from updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    /// Registers a tensor. Every name has exactly one owner, so re-registering
    /// is an error.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(config_err!("parameter `{name}` registered twice"));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == tensor.shape() => {
                *slot = tensor;
                Ok(())
            }
            Some(slot) => Err(config_err!(
                "parameter `{name}` has shape {:?}, replacement has {:?}",
                slot.shape(),
                tensor.shape()
            )),
            None => Err(config_err!("unknown parameter `{name}`")),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| config_err!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(config_err!("cannot freeze unknown parameter `{name}`"));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values under names starting with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn num_values(&self) -> usize {
        self.count_with_prefix("")
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        self.frozen.extend(other.frozen);
        Ok(())
    }
}

/// Seeded initialiser shared by every module constructor.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    /// `name.w` (in x out, N(0, std)) and `name.b` (zeros).
    pub fn linear<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
    ) -> Result<()> {
        store.insert(format!("{name}.w"), self.normal(&[inputs, outputs], std))?;
        store.insert(format!("{name}.b"), Tensor::zeros(&[1, outputs]))
    }

    pub fn layer_norm<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
    ) -> Result<()> {
        store.insert(format!("{name}.g"), Tensor::full(&[1, dim], T::one()))?;
        store.insert(format!("{name}.b"), Tensor::zeros(&[1, dim]))
    }
}
