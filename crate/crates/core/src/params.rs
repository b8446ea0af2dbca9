//! Named, ordered collections of trainable tensors.
//!
//! A `ParamSet` is the canonical owner of network weights outside any graph.
//! Its defining contract is a stable order: `flatten` concatenates all
//! entries in insertion order, and `unflatten_into` writes such a vector
//! back, so the two are mutual inverses for any set with matching layout.
//! Optimizers, checkpoints, and finite-difference probes all operate on the
//! flattened form.

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Errors from parameter-set construction and layout operations.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    /// A second entry was pushed under an existing name.
    DuplicateName(String),
    /// A flat vector's length does not match the set's total element count.
    LengthMismatch { expected: usize, got: usize },
    /// A name lookup failed.
    UnknownName(String),
}

impl core::fmt::Display for ParamError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ParamError::DuplicateName(n) => write!(f, "duplicate parameter name: {n}"),
            ParamError::LengthMismatch { expected, got } => {
                write!(f, "flat parameter vector has {got} elements, layout needs {expected}")
            }
            ParamError::UnknownName(n) => write!(f, "unknown parameter name: {n}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ParamError {}

/// An ordered set of uniquely named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Append a named tensor; names must be unique within the set.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ParamError::DuplicateName(name));
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

    /// Total number of scalar elements across all entries.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ParamError::UnknownName(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Concatenate all entries, in insertion order, into one flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Write a flat vector (as produced by `flatten`) back into the entries.
    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<(), ParamError> {
        if flat.len() != self.total_len() {
            return Err(ParamError::LengthMismatch { expected: self.total_len(), got: flat.len() });
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// A copy of this set with the same names and shapes but values taken
    /// from `flat`.
    pub fn with_values(&self, flat: &[f64]) -> Result<ParamSet, ParamError> {
        let mut out = self.clone();
        out.unflatten_into(flat)?;
        Ok(out)
    }

    /// Bind every entry into `g` as a trainable leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Bind every entry into `g` as a non-trainable constant, in order.
    pub fn bind_const(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Read current node values out of `g` into a set with this layout.
    /// Used to materialize adapted parameters after an in-graph adaptation.
    pub fn read_values(&self, g: &Graph, ids: &[NodeId]) -> ParamSet {
        assert_eq!(ids.len(), self.len(), "node list does not match parameter layout");
        let mut out = self.clone();
        for (i, &id) in ids.iter().enumerate() {
            let src = g.value(id);
            assert_eq!(
                src.numel(),
                out.entries[i].1.numel(),
                "node {} has {} elements, entry {} ({}) has {}",
                id,
                src.numel(),
                i,
                out.entries[i].0,
                out.entries[i].1.numel()
            );
            out.entries[i].1.data_mut().copy_from_slice(src.data());
        }
        out
    }

    /// Element count of each entry, in order (layout fingerprint for
    /// checkpoint validation).
    pub fn entry_lens(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, t)| t.numel()).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample_set() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("a", Tensor::matrix(2, 3, alloc::vec![1., 2., 3., 4., 5., 6.])).unwrap();
        p.push("b", Tensor::vector(alloc::vec![7., 8.])).unwrap();
        p.push("c", Tensor::scalar(9.)).unwrap();
        p
    }

    #[test]
    fn flatten_then_unflatten_roundtrips() {
        let p = sample_set();
        let flat = p.flatten();
        assert_eq!(flat, alloc::vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut q = p.clone();
        q.unflatten_into(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn unflatten_then_flatten_roundtrips() {
        let mut p = sample_set();
        let flat: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        p.unflatten_into(&flat).unwrap();
        assert_eq!(p.flatten(), flat);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(1.0)).unwrap();
        let err = p.push("w", Tensor::scalar(2.0)).unwrap_err();
        assert_eq!(err, ParamError::DuplicateName("w".into()));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut p = sample_set();
        let err = p.unflatten_into(&[1.0, 2.0]).unwrap_err();
        assert_eq!(err, ParamError::LengthMismatch { expected: 9, got: 2 });
    }

    #[test]
    fn binding_preserves_order_and_values() {
        let p = sample_set();
        let mut g = Graph::new();
        let ids = p.bind(&mut g);
        assert_eq!(ids.len(), 3);
        assert_eq!(g.value(ids[0]).data()[4], 5.0);
        assert_eq!(g.value(ids[2]).item(), 9.0);
        let q = p.read_values(&g, &ids);
        assert_eq!(p, q);
    }
}
