use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a parameter array does in the network; only
/// [`Role::PrunableWeight`] arrays carry masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    PrunableWeight,
    Bias,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    /// Pruning module index `j` (forward order of convolutional blocks).
    pub module: usize,
    pub name: String,
    pub role: Role,
    pub tensor: Tensor<f32>,
}

/// Ordered, named collection of trainable arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate parameter name `{}`",
                    p.name
                )));
            }
        }
        Ok(Self { params })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn as_slice(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.role == Role::PrunableWeight)
    }

    /// Number of pruning modules (one past the largest module index).
    pub fn module_count(&self) -> usize {
        self.params.iter().map(|p| p.module + 1).max().unwrap_or(0)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn prunable_elements(&self) -> usize {
        self.prunable().map(|p| p.tensor.len()).sum()
    }

    /// True when both sets have identical names, roles, modules and shapes.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.role == b.role
                    && a.module == b.module
                    && a.tensor.shape() == b.tensor.shape()
            })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }
}
