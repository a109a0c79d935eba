use serde::{Deserialize, Serialize};

use super::Shape;
use crate::error::{Error, Result};

/// One named dense parameter array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Flat, ordered list of named parameter arrays (the model state θ).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    entries: Vec<Parameter>,
}

impl ParameterVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Shape, data: Vec<f64>) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParameter(name));
        }
        if data.len() != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                op: "parameter",
                lhs: shape,
                rhs: (1, data.len()),
            });
        }
        let grad = vec![0.0; data.len()];
        self.entries.push(Parameter {
            name,
            shape,
            data,
            grad,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    /// Total number of scalar entries across all arrays.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(Parameter::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch {
                op: "set_flat",
                lhs: (1, self.flat_len()),
                rhs: (1, flat.len()),
            });
        }
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.numel();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.clear();
            p.grad.resize(p.data.len(), 0.0);
        }
    }

    /// L2 norm of the accumulated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Restores zeroed gradient buffers after deserialization.
    pub(crate) fn ensure_grad_buffers(&mut self) {
        for p in &mut self.entries {
            if p.grad.len() != p.data.len() {
                p.grad = vec![0.0; p.data.len()];
            }
        }
    }
}
