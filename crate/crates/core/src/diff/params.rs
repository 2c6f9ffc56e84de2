//! Named parameter tensors and their JSON checkpoint manifest.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IolError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A dense row-major tensor with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name or a value/shape mismatch,
    /// both of which are construction bugs.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "tensor '{name}' shape/value mismatch");
        assert!(!self.index.contains_key(&name), "duplicate tensor '{name}'");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.tensors.push(ParamTensor {
            name,
            shape,
            grad: vec![0.0; n],
            values,
        });
        id
    }

    /// Adds a tensor initialized uniformly in `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, shape, values)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies accumulated gradients into the tensors' gradient buffers.
    pub fn set_grads(&mut self, grads: &Gradients) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            t.grad.copy_from_slice(g);
        }
    }

    pub fn zeros_like_grads(&self) -> Gradients {
        Gradients(self.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn to_manifest(&self) -> ParamManifest {
        ParamManifest {
            version: MANIFEST_VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a manifest. Every tensor must be present with
    /// the same shape.
    pub fn load_manifest(&mut self, manifest: &ParamManifest) -> Result<()> {
        if manifest.version != MANIFEST_VERSION {
            return Err(IolError::Validation(format!(
                "unsupported parameter manifest version {}",
                manifest.version
            )));
        }
        if manifest.tensors.len() != self.tensors.len() {
            return Err(IolError::shape("parameter manifest", self.tensors.len(), manifest.tensors.len()));
        }
        for entry in &manifest.tensors {
            let id = self.id_of(&entry.name).ok_or_else(|| {
                IolError::Validation(format!("unknown tensor '{}' in manifest", entry.name))
            })?;
            let t = &mut self.tensors[id.0];
            if t.shape != entry.shape || entry.values.len() != t.values.len() {
                return Err(IolError::shape(
                    format!("tensor '{}'", entry.name),
                    t.values.len(),
                    entry.values.len(),
                ));
            }
            if entry.values.iter().any(|v| !v.is_finite()) {
                return Err(IolError::Numerical(format!("tensor '{}' holds non-finite values", entry.name)));
            }
            t.values.copy_from_slice(&entry.values);
        }
        Ok(())
    }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Per-tensor gradient buffers, parallel to a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm.is_finite() && max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }
}
