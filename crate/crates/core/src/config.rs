//! Network configuration, loss weights and the flat `key = value` text format.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel sizes of the three parallel multi-scale convolution branches.
pub const MSCONV_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Width of the first level; level `n` (1-based) has `base_channels * 2^(n-1)`.
    pub base_channels: usize,
    pub num_scales: usize,
    pub transformer_depth: usize,
    pub msconv_depth: usize,
    pub prompt_dim: usize,
    pub attention_heads: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_scales: 4,
            transformer_depth: 2,
            msconv_depth: 3,
            prompt_dim: 512,
            attention_heads: 4,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 7] =
        ["base_channels", "num_scales", "transformer_depth", "msconv_depth", "prompt_dim", "attention_heads", "seed"];

    /// Small network used by tests and desk-scale runs.
    pub fn toy(base_channels: usize, prompt_dim: usize) -> Self {
        Self { base_channels, prompt_dim, ..Self::default() }
    }

    pub fn validate(self) -> Result<Self> {
        if self.num_scales != 4 {
            return Err(Error::Config(format!("num_scales must be 4, got {}", self.num_scales)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be at least 4, got {}", self.base_channels)));
        }
        if self.prompt_dim < 8 {
            return Err(Error::Config(format!("prompt_dim must be at least 8, got {}", self.prompt_dim)));
        }
        if self.msconv_depth != 3 {
            return Err(Error::Config(format!("msconv_depth must be 3, got {}", self.msconv_depth)));
        }
        if self.transformer_depth == 0 {
            return Err(Error::Config("transformer_depth must be positive".into()));
        }
        if self.attention_heads == 0 || !self.base_channels.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "attention_heads ({}) must divide base_channels ({})",
                self.attention_heads, self.base_channels
            )));
        }
        Ok(self)
    }

    /// Channel width of level `level` (0-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("base_channels", self.base_channels);
        kv.set("num_scales", self.num_scales);
        kv.set("transformer_depth", self.transformer_depth);
        kv.set("msconv_depth", self.msconv_depth);
        kv.set("prompt_dim", self.prompt_dim);
        kv.set("attention_heads", self.attention_heads);
        kv.set("seed", self.seed);
    }

    /// Reads the network keys from `kv`, falling back to defaults for absent keys.
    /// Consumed keys are removed from `kv`.
    pub fn take_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            base_channels: kv.take_or("base_channels", d.base_channels)?,
            num_scales: kv.take_or("num_scales", d.num_scales)?,
            transformer_depth: kv.take_or("transformer_depth", d.transformer_depth)?,
            msconv_depth: kv.take_or("msconv_depth", d.msconv_depth)?,
            prompt_dim: kv.take_or("prompt_dim", d.prompt_dim)?,
            attention_heads: kv.take_or("attention_heads", d.attention_heads)?,
            seed: kv.take_or("seed", d.seed)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        self.write_kv(&mut kv);
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::take_kv(&mut kv)?;
        kv.ensure_empty()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 12.0, gamma: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(self) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.alpha) && ok(self.beta) && ok(self.gamma) {
            Ok(self)
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Ordered `key = value` map, one pair per line. Blank lines and lines starting
/// with `#` are ignored when parsing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl core::fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => {
                raw.parse().map(Some).map_err(|_| Error::Parse(format!("invalid value `{raw}` for key `{key}`")))
            }
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?.ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ensure_empty(&self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.keys().collect();
            Err(Error::Parse(format!("unknown keys: {}", keys.join(", "))))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
