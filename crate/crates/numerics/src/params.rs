//! Named, flat-indexable parameter collections.

use crate::matrix::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix<f64>,
    pub grad: Matrix<f64>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

/// Master copy of every learnable tensor, always 64-bit.
///
/// Enumeration order is insertion order and never changes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix<f64>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<f64> {
        &mut self.entries[id.0].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total number of scalars across all parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Maps a flat scalar index to `(parameter, offset within it)`.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.value.len() {
                return Some((ParamId(i), flat));
            }
            flat -= e.value.len();
        }
        None
    }

    pub fn flat_get(&self, flat: usize) -> f64 {
        let (id, off) = self.locate(flat).expect("flat index out of range");
        self.entries[id.0].value.data()[off]
    }

    pub fn flat_set(&mut self, flat: usize, v: f64) {
        let (id, off) = self.locate(flat).expect("flat index out of range");
        self.entries[id.0].value.data_mut()[off] = v;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Overwrites every gradient slot. Panics on count or shape mismatch.
    pub fn set_grads(&mut self, grads: Vec<Matrix<f64>>) {
        assert_eq!(grads.len(), self.entries.len(), "gradient count mismatch");
        for (e, g) in self.entries.iter_mut().zip(grads) {
            assert_eq!(e.value.shape(), g.shape(), "gradient shape mismatch for {}", e.name);
            e.grad = g;
        }
    }

    pub fn grads(&self) -> Vec<Matrix<f64>> {
        self.entries.iter().map(|e| e.grad.clone()).collect()
    }

    /// Working copy of the values in the requested precision.
    pub fn values_as<T: Real>(&self) -> Vec<Matrix<T>> {
        self.entries.iter().map(|e| e.value.cast()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}
