//! Named parameter storage shared by every trainable component.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::rng::seeded;

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named learnable tensors.
///
/// Insertion order is stable and defines the order used by the optimizer,
/// the checkpoint writer and gradient reduction.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: parameter layouts are
    /// built by code, so a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces every value from `other`, which must have the identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(invalid("parameter layouts differ"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.dim() != src.dim() {
                return Err(invalid("parameter shapes differ"));
            }
            dst.assign(src);
        }
        Ok(())
    }

    /// Overwrites every tensor with N(0, std²) draws. Used by tests that need
    /// non-degenerate weights everywhere (zero-initialized gates included).
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = seeded(seed);
        for v in &mut self.values {
            v.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

/// Uniform Xavier/Glorot initialisation for a `fan_in × fan_out` weight.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn zeros(rows: usize, cols: usize) -> Matrix {
    Matrix::zeros((rows, cols))
}
