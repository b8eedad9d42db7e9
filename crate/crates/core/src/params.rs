//! Named parameter tensors of a learned policy.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered set of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, t) in entries {
            set.insert(name, t)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Same names, new tensors (in order).
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.len(),
                tensors.len()
            )));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for ((name, old), new) in self.entries.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ParamSet::with_tensors",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
            entries.push((name.clone(), new));
        }
        Ok(Self { entries })
    }

    /// Records every tensor as a leaf, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Slices of a flat node (laid out as [`ParamSet::flatten`]) shaped like
    /// each tensor, in order.
    pub fn views(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>> {
        let mut offset = 0;
        self.tensors()
            .map(|t| {
                let piece = tape.slice(flat, 0, offset, t.numel())?;
                offset += t.numel();
                tape.reshape(piece, t.shape())
            })
            .collect()
    }

    /// Concatenation of every tensor's data.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                self.numel(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = self
            .tensors()
            .map(|t| {
                let n = t.numel();
                let out = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
                out
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_tensors(tensors)
    }
}
