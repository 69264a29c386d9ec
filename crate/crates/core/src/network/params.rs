use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Graph, Tensor, Var};
use crate::rng::{Domain, RngKey};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Replace an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ManifestMismatch {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// SHA-256 over every name, shape and little-endian payload, in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Check that `self` has exactly the names and shapes of `reference`.
    pub fn check_matches(&self, reference: &ParamSet) -> Result<()> {
        for (name, expected) in &reference.tensors {
            let found = self.get(name)?;
            if found.shape() != expected.shape() {
                return Err(Error::ManifestMismatch {
                    name: name.clone(),
                    expected: expected.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| !reference.contains(n)) {
            return Err(Error::ManifestMismatch {
                name: extra.to_string(),
                expected: vec![],
                found: self.get(extra)?.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// A [`ParamSet`] bound into one graph as leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind every tensor; `trainable` decides between parameter and constant leaves.
    pub fn new(graph: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient for every trainable entry, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.wrt(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Truncated-normal initializer (std 0.02, cut at two standard deviations).
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

pub const INIT_STD: f64 = 0.02;

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer::from_key(RngKey::new(seed, 0, 0))
    }

    pub fn from_key(key: RngKey) -> Self {
        Initializer {
            rng: key.stream(Domain::Init),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn truncated_normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let x = self.normal.sample(&mut self.rng);
            if x.abs() <= 2.0 * INIT_STD {
                data.push(x);
            }
        }
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}
