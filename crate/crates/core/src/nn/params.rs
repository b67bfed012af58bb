//! Ordered, named collections of real-valued arrays.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A dense f64 array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Array { shape, data: vec![0.0; len] }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "array data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered named arrays; the order is part of the identity and is preserved
/// by save/load.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Array)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, array));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Same names, order, and shapes, data zeroed.
    pub fn zeros_like(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, array) in &self.entries {
            out.insert(name.clone(), Array::zeros(array.shape.clone())).expect("fresh set");
        }
        out
    }

    /// Error unless `other` has identical names, order, and shapes.
    pub fn assert_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter sets differ in entry count: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, aa), (nb, ab)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::InvalidArgument(format!(
                    "parameter name mismatch: {na:?} vs {nb:?}"
                )));
            }
            if aa.shape != ab.shape {
                return Err(Error::InvalidArgument(format!(
                    "parameter {na:?} shape mismatch: {:?} vs {:?}",
                    aa.shape, ab.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self[i] += scale * other[i]`.
    pub fn axpy(&mut self, scale: f64, other: &ParameterSet) -> Result<()> {
        self.assert_compatible(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (va, vb) in a.data.iter_mut().zip(&b.data) {
                *va += scale * vb;
            }
        }
        Ok(())
    }

    /// Max absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.assert_compatible(other)?;
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (va, vb) in a.data.iter().zip(&b.data) {
                worst = worst.max((va - vb).abs());
            }
        }
        Ok(worst)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.data.iter().all(|v| v.is_finite()))
    }
}
