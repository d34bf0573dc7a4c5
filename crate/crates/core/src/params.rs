use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named learnable tensors. Iteration is in name order.
///
/// Initial values are a pure function of `(name, shape, seed)`, so two
/// stores built with the same seed agree on every shared name regardless
/// of which other parameters exist.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

/// `uniform(-a, a)` with `a = sqrt(1 / fan_in)`, drawn from a stream keyed
/// by `(seed, name, shape)`.
pub fn init_uniform_values(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for &e in shape {
        h.update((e as u64).to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let a = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `name` with seeded uniform values and returns the leaf.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let data = init_uniform_values(name, shape, fan_in, self.seed);
        let t = Tensor::param(shape, data).expect("shape and data agree");
        self.params.insert(name.to_string(), t.clone());
        t
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Tensor {
        let t = Tensor::full(shape, value).into_param();
        self.params.insert(name.to_string(), t.clone());
        t
    }

    /// Replaces (or adds) `name`; the stored tensor always collects gradients.
    pub fn set(&mut self, name: &str, values: Tensor) {
        let t = if values.requires_grad() { values } else { values.into_param() };
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copy whose tensors are detached, for forward passes that need no
    /// gradients.
    pub fn frozen(&self) -> ParamStore {
        Self {
            seed: self.seed,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}
