//! Small tensor/autodiff toolkit backing every trained model in the crate:
//! a define-by-run tape over `ndarray`, dense/conv layers, batch norm,
//! spectral normalization, and Adam. Generic over `f32` (training) and
//! `f64` (gradient checks).

pub mod adam;
pub mod check;
pub mod conv;
pub mod layers;
pub mod tape;

use ndarray::{ArrayD, NdFloat};
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use layers::{BatchNorm, Conv2d, ConvT2d, Dense};
pub use tape::{Session, Tape, Var};

/// Scalar type for all tensor math.
pub trait Real: NdFloat + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Index of a parameter array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, named storage for every trainable array of a model.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Real> {
    entries: Vec<(String, ArrayD<S>)>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Convert every array to another scalar type.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.mapv(|x| T::from_f64(x.as_f64()))))
                .collect(),
        }
    }
}
