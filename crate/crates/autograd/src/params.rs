use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Tape, Var};
use crate::Float;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Float> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Array2<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.values
    }

    /// Same names and shapes, converted to another precision.
    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64_lossy(x.to_f64_lossy())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and the bit patterns of every entry.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            hasher.update(name.as_bytes());
            hasher.update((value.nrows() as u64).to_le_bytes());
            hasher.update((value.ncols() as u64).to_le_bytes());
            for &x in value.iter() {
                hasher.update(x.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Places every tensor on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> BoundParams<'t, F> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// A [`ParamSet`] placed on a tape for one forward pass.
pub struct BoundParams<'t, F: Float> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Float> BoundParams<'t, F> {
    pub fn get(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    /// One gradient per parameter, zero-filled where nothing flowed.
    pub fn gradients(&self, grads: &Gradients<F>) -> Vec<Array2<F>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Precision-independent storage form of one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl StoredMatrix {
    pub fn from_array<F: Float>(a: &Array2<F>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    /// `None` when `data` does not hold `rows * cols` entries.
    pub fn to_array<F: Float>(&self) -> Option<Array2<F>> {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.data.iter().map(|&x| F::from_f64_lossy(x)).collect(),
        )
        .ok()
    }
}
