use std::collections::HashMap;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::rng::Rng;

/// Index of a parameter inside [`Parameters`].
pub type ParamId = usize;

/// Named trainable weight arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// `rows × cols` weights drawn from `N(0, 1/rows)`.
    pub fn add_scaled_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let std = (1.0 / rows.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Rounds every weight to the nearest `f32`, making checkpoint round-trips exact.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| f64::from(x as f32));
        }
    }

    /// Hash of the ordered (name, shape) list.
    pub fn shape_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies values for every name present in both stores with equal shapes.
    /// Returns the number of copied parameters.
    pub fn copy_matching_from(&mut self, other: &Parameters) -> usize {
        let mut copied = 0;
        for (id, name) in self.names.iter().enumerate() {
            if let Some(src) = other.id(name) {
                if other.values[src].dim() == self.values[id].dim() {
                    self.values[id].assign(&other.values[src]);
                    copied += 1;
                }
            }
        }
        copied
    }
}
