//! Ordered, named parameter registry shared by all networks.
//!
//! Order is insertion order and is stable, which makes checkpoints and
//! optimizer state byte-reproducible.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{OccError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| OccError::InvalidConfig(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| OccError::InvalidConfig(format!("unknown parameter '{name}'")))?;
        self.entries[i].1 = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Lift every parameter onto a tape, trainable or frozen.
    pub fn lift(&self, tape: &Tape<T>, trainable: bool) -> ParamVars<T> {
        let mut vars = HashMap::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        ParamVars { vars }
    }

    /// Merge another registry under a prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Params<T>) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn bit_eq(&self, other: &Params<T>) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Parameters lifted onto a tape for one forward/backward pass.
pub struct ParamVars<T> {
    vars: HashMap<String, Var<T>>,
}

impl<T: Real> ParamVars<T> {
    pub fn get(&self, name: &str) -> Result<Var<T>> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| OccError::InvalidConfig(format!("unknown parameter '{name}'")))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var<T>) {
        self.vars.insert(name.into(), v);
    }

    /// Collect gradients in registry order; `None` where no gradient flowed.
    pub fn collect_grads(
        &self,
        params: &Params<T>,
        grads: &crate::autodiff::Gradients<T>,
    ) -> Vec<Option<Tensor<T>>> {
        params
            .iter()
            .map(|(name, _)| self.vars.get(name).and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut p = Params::<f64>::new();
        p.insert("b", Tensor::zeros(&[2]));
        p.insert("a", Tensor::zeros(&[1]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a"]);
    }
}
