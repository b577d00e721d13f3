//! Named model parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// One model weight. `trainable: false` freezes it: gradients for it come
/// back as zeros and optimizers leave it untouched.
#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar = f64> {
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// All weights of a model, keyed by dotted path (`visual.head.conv1.weight`).
/// BTreeMap keeps iteration order, and therefore training, deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar = f64> {
    map: BTreeMap<String, Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool) {
        self.map
            .insert(name.to_string(), Parameter { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a parameter's value, keeping its trainable flag.
    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let param = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: param.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        param.value = value;
        Ok(())
    }

    /// Flips the trainable flag on every parameter whose name starts with
    /// `prefix`. Returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, param) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                param.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Inserts this parameter into a graph as a leaf (or returns the node it
    /// already occupies there).
    pub fn leaf(&self, graph: &Graph<S>, name: &str) -> Result<Var> {
        let param = self.get(name)?;
        Ok(graph.leaf(name, param.value.clone(), param.trainable))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total element count over all parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    /// Merges another store in, overwriting on name collision.
    pub fn absorb(&mut self, other: ParamStore<S>) {
        self.map.extend(other.map);
    }

    /// True when both stores hold bit-identical values for every name with
    /// the given prefix and the same set of such names.
    pub fn prefix_identical(&self, other: &ParamStore<S>, prefix: &str) -> bool {
        let mine: Vec<_> = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        let theirs: Vec<_> = other
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|((ka, pa), (kb, pb))| {
                ka == kb
                    && pa.value.shape() == pb.value.shape()
                    && pa
                        .value
                        .data()
                        .iter()
                        .zip(pb.value.data())
                        .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
            })
    }
}
