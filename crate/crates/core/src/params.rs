use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Ordered collection of named parameter tensors.
///
/// Iteration order is insertion order and is part of the model's contract:
/// gradient vectors, optimizer moments and checkpoints all follow it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    /// Graph leaves for every parameter, in order.
    pub fn bind(&self, trainable: bool) -> Vec<Var> {
        self.tensors
            .values()
            .map(|t| if trainable { Var::leaf(t.clone()) } else { Var::constant(t.clone()) })
            .collect()
    }

    /// A set with the same names and shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// Fails unless `other` has exactly the same names, order and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::Checkpoint(format!("parameter {na} does not match {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {na} has shape {:?}, expected {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replaces every tensor, in order, with the corresponding entry of `values`.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.len(),
                values.len()
            )));
        }
        for ((name, slot), v) in self.tensors.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn layout_check_names_offender() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut b = ParamSet::new();
        b.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        let msg = a.check_layout(&b).unwrap_err().to_string();
        assert!(msg.contains('w') && msg.contains("[2, 3]"), "{msg}");
    }
}
