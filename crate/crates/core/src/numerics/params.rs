use indexmap::IndexMap;

use super::array::DenseArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Named trainable arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, DenseArray>,
}

/// Tape handles for every parameter, in the set's order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, array: DenseArray) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(name, array.with_grad());
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.entries.get_mut(name)
    }

    pub fn by_index(&self, index: usize) -> &DenseArray {
        &self.entries[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseArray)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(DenseArray::len).sum()
    }

    /// Copies every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .values()
            .map(|a| {
                let mut leaf = a.clone();
                leaf.zero_grad();
                tape.leaf(leaf)
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the tape gradients of bound leaves into each parameter's slot.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (param, &var) in self.entries.values_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g);
            }
        }
    }

    /// Gives every parameter that received no gradient an explicit zero one.
    pub fn fill_missing_grads(&mut self) {
        for p in self.entries.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.len()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(DenseArray::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let factor = max_norm / norm;
            for p in self.entries.values_mut() {
                if let Some(g) = &mut p.grad {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        norm
    }

    /// Flat copy of every value, for update-norm comparisons and checksums.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|a| a.values().iter().copied())
            .collect()
    }
}
