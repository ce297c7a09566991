//! Degradation prompts and the frozen text encoder interface.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{derive_seed, fnv1a};

pub const TASK_TAG: &str = "IVIF";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrDegradation {
    #[default]
    None,
    LowContrast,
    Noise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViDegradation {
    #[default]
    None,
    LowLight,
    Overexposure,
}

impl IrDegradation {
    pub const ALL: [Self; 3] = [Self::None, Self::LowContrast, Self::Noise];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::None => "no degradation",
            Self::LowContrast => "low contrast",
            Self::Noise => "noise",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LowContrast => "low_contrast",
            Self::Noise => "noise",
        }
    }
}

impl ViDegradation {
    pub const ALL: [Self; 3] = [Self::None, Self::LowLight, Self::Overexposure];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::None => "no degradation",
            Self::LowLight => "low light",
            Self::Overexposure => "overexposure",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LowLight => "low_light",
            Self::Overexposure => "overexposure",
        }
    }
}

impl core::str::FromStr for IrDegradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.key() == s)
            .ok_or_else(|| Error::Parse(format!("unknown infrared degradation `{s}`")))
    }
}

impl core::str::FromStr for ViDegradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.key() == s)
            .ok_or_else(|| Error::Parse(format!("unknown visible degradation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub ir: IrDegradation,
    pub vi: ViDegradation,
}

impl PromptTemplate {
    pub fn new(ir: IrDegradation, vi: ViDegradation) -> Self {
        Self { ir, vi }
    }

    /// The prompt used when no degradation information is available.
    pub fn clean() -> Self {
        Self::new(IrDegradation::None, ViDegradation::None)
    }

    pub fn render(&self) -> String {
        format!(
            "{TASK_TAG}. The infrared image suffers from {}. The visible image suffers from {}.",
            self.ir.phrase(),
            self.vi.phrase()
        )
    }

    /// Infrared-specific prompt: the task tag and the infrared clause.
    pub fn render_ir(&self) -> String {
        format!("{TASK_TAG}. The infrared image suffers from {}.", self.ir.phrase())
    }

    /// Visible-specific prompt: the task tag and the visible clause.
    pub fn render_vi(&self) -> String {
        format!("{TASK_TAG}. The visible image suffers from {}.", self.vi.phrase())
    }

    /// Every (infrared, visible) combination.
    pub fn all() -> impl Iterator<Item = Self> {
        IrDegradation::ALL.into_iter().flat_map(|ir| ViDegradation::ALL.into_iter().map(move |vi| Self::new(ir, vi)))
    }
}

pub fn render_prompt(t: &PromptTemplate) -> String {
    t.render()
}

/// A frozen text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

impl PromptEmbedding {
    pub fn new(vector: Vec<f64>, source_text: String) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range(format!("prompt embedding for `{source_text}` must be nonempty and finite")));
        }
        Ok(Self { vector, source_text })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na = libm::sqrt(self.vector.iter().map(|v| v * v).sum());
        let nb = libm::sqrt(other.vector.iter().map(|v| v * v).sum());
        dot / (na * nb)
    }
}

/// Text encoder backend. Implementations hold no trainable state.
pub trait PromptEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<PromptEmbedding>;
}

impl<E: PromptEncoder + ?Sized> PromptEncoder for Box<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn encode(&self, text: &str) -> Result<PromptEmbedding> {
        (**self).encode(text)
    }
}

/// Lower-cased alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase())
}

/// Deterministic, dependency-free stand-in for a pretrained text encoder.
///
/// Each token owns a fixed pseudorandom Gaussian direction seeded by a hash of
/// the token; the embedding is the L2-normalized sum over the token multiset.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    dim: usize,
    seed: u64,
}

impl StubEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_direction(&self, token: &str) -> Vec<f64> {
        let seed = derive_seed(self.seed ^ fnv1a(token.as_bytes()), token);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl PromptEncoder for StubEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<PromptEmbedding> {
        let mut acc = vec![0.0; self.dim];
        let mut any = false;
        for token in tokenize(text) {
            any = true;
            for (a, d) in acc.iter_mut().zip(self.token_direction(&token)) {
                *a += d;
            }
        }
        if !any {
            return Err(Error::EmptyPrompt);
        }
        let norm = libm::sqrt(acc.iter().map(|v| v * v).sum());
        for a in &mut acc {
            *a /= norm;
        }
        PromptEmbedding::new(acc, text.into())
    }
}
