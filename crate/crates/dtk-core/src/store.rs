//! Named parameter registry with a frozen/trainable partition.
//!
//! Backbone and text-encoder weights are frozen; adapter tokens, gates,
//! encoder/projector and classifier weights are trainable. The partition is
//! total: every registered parameter is exactly one of the two.

use std::collections::BTreeMap;

use crate::error::{DtkError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub tensor: Tensor<F>,
    pub frozen: bool,
}

/// Map from dotted parameter name to tensor plus frozen flag.
/// BTreeMap keeps iteration order deterministic everywhere (init, optimizer,
/// checkpoints, census).
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F: Scalar> {
    params: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DtkError::Contract(format!("parameter {name} registered twice")));
        }
        let tensor = tensor.with_requires_grad(!frozen);
        self.params.insert(name, Param { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| DtkError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DtkError::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn count_elements(&self, frozen: bool) -> usize {
        self.params
            .values()
            .filter(|p| p.frozen == frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// CRC32 of each frozen tensor's raw little-endian bytes; the freeze
    /// audit compares these before and after training runs.
    pub fn frozen_hashes(&self) -> BTreeMap<String, u32> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(name, p)| {
                let mut bytes = Vec::with_capacity(p.tensor.numel() * 8);
                for &v in p.tensor.data() {
                    v.write_le(&mut bytes);
                }
                (name.clone(), crc32fast::hash(&bytes))
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.all_finite())
    }

    /// Zero every trainable gradient slot.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), Param { tensor: p.tensor.cast::<G>(), frozen: p.frozen }))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_total_and_disjoint() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a", Tensor::zeros(vec![2, 2]), true).unwrap();
        store.insert("b", Tensor::zeros(vec![3]), false).unwrap();
        assert_eq!(store.count_elements(true) + store.count_elements(false), store.total_elements());
        assert!(store.get("a").unwrap().frozen);
        assert!(!store.get("b").unwrap().frozen);
        assert!(!store.get("a").unwrap().tensor.requires_grad());
        assert!(store.get("b").unwrap().tensor.requires_grad());
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a", Tensor::zeros(vec![1]), true).unwrap();
        assert!(store.insert("a", Tensor::zeros(vec![1]), false).is_err());
    }
}
