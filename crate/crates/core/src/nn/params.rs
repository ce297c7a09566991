//! Named parameter storage with name-derived deterministic initialization.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::hash::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He/Kaiming normal for a LeakyReLU(0.2) network: std = sqrt(2 / ((1 + 0.2^2) * fan_in)).
    Kaiming {
        fan_in: usize,
    },
    /// Normal with the given standard deviation.
    Normal(f64),
    Constant(f64),
}

/// Standard deviation of [`Init::Kaiming`].
pub fn kaiming_std(fan_in: usize) -> f64 {
    libm::sqrt(2.0 / (1.04 * fan_in.max(1) as f64))
}

/// Rounds to the nearest `f32`. Parameters and optimizer moments are kept
/// `f32`-representable so that checkpoints (stored as `f32`) are lossless.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, names: Vec::new(), tensors: Vec::new() }
    }

    /// Registers a parameter. The initial values depend only on the store seed
    /// and `name`, so two networks sharing a parameter name start identical.
    ///
    /// # Panics
    ///
    /// Panics if `name` is already registered.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name `{name}`");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let std = match init {
            Init::Kaiming { fan_in } => Some(kaiming_std(fan_in)),
            Init::Normal(std) => Some(std),
            Init::Constant(_) => None,
        };
        let tensor = match (std, init) {
            (Some(std), _) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| round_f32(normal.sample(&mut rng)))
            }
            (None, Init::Constant(v)) => Tensor::full(shape, round_f32(v)),
            (None, _) => unreachable!(),
        };
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
