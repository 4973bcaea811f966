//! Named parameters and parameter collections.

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::{fnv1a_init, fnv1a_u64, Tensor};
use std::collections::HashMap;

/// A named tensor with a frozen/trainable flag. The flag decides whether the
/// tape treats it as a gradient leaf and whether the optimizer may touch it.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn trainable(name: &str, mut tensor: Tensor) -> Self {
        tensor.requires_grad = true;
        Parameter {
            name: name.to_string(),
            tensor,
            trainable: true,
        }
    }

    pub fn frozen(name: &str, mut tensor: Tensor) -> Self {
        tensor.requires_grad = false;
        Parameter {
            name: name.to_string(),
            tensor,
            trainable: false,
        }
    }
}

/// Insertion-ordered set of uniquely named parameters. Iteration order is
/// the insertion order, which keeps optimizer updates and checkpoint layout
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Config(format!(
                "duplicate parameter name: {}",
                p.name
            )));
        }
        self.index.insert(p.name.clone(), self.items.len());
        self.items.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Parameter {
        let i = self.index[name];
        &self.items[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.items[i])
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        let i = self.index[name];
        &mut self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.items.iter().map(|p| p.name.clone()).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for p in &mut self.items {
            p.trainable = flag;
            p.tensor.requires_grad = flag;
        }
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, flag: bool) {
        for p in &mut self.items {
            if pred(&p.name) {
                p.trainable = flag;
                p.tensor.requires_grad = flag;
            }
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.items.iter().all(|p| !p.trainable)
    }

    /// Remove a parameter by name (used to discard temporary heads).
    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        let i = self.index.remove(name)?;
        let p = self.items.remove(i);
        for idx in self.index.values_mut() {
            if *idx > i {
                *idx -= 1;
            }
        }
        Some(p)
    }

    /// Attach gradients produced by a backward pass to the matching
    /// parameters. Gradients for unknown names are rejected.
    pub fn load_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let p = &mut self.items[i];
            if g.shape != p.tensor.shape {
                return Err(Error::ShapeMismatch {
                    op: "load_grads",
                    lhs: p.tensor.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            p.tensor.grad = Some(g.data.clone());
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.items {
            p.tensor.grad = None;
        }
    }

    /// Order-sensitive bitwise fingerprint over every tensor. Two calls agree
    /// iff all names, shapes and f64 bit patterns agree.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv1a_init();
        for p in &self.items {
            for b in p.name.bytes() {
                h = fnv1a_u64(h, b as u64);
            }
            h = fnv1a_u64(h, p.tensor.fingerprint());
        }
        h
    }
}
