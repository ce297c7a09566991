//! Prompt encoder backends available to the command line.

use std::collections::HashMap;
use std::path::Path;

use promptfuse_core::prompt::{tokenize, PromptEmbedding, PromptEncoder, StubEncoder};

use crate::error::{Error, Result};

/// Word-vector backend reading a GloVe-style text file: one token per line
/// followed by its whitespace-separated components. A prompt embeds as the
/// L2-normalized mean of its known token vectors.
#[derive(Clone, Debug)]
pub struct WordVectorEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorEncoder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| Error::Encoder(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 1)))
                .collect::<std::result::Result<_, _>>()?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(format!("line {}: expected finite components after `{token}`", i + 1));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(format!("line {}: {} components, expected {d}", i + 1, v.len()));
                }
                _ => {}
            }
            vectors.insert(token.to_lowercase(), v);
        }
        let dim = dim.ok_or("no word vectors")?;
        Ok(Self { dim, vectors })
    }
}

impl PromptEncoder for WordVectorEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> promptfuse_core::Result<PromptEmbedding> {
        let mut acc = vec![0.0; self.dim];
        let mut known = 0usize;
        let mut any = false;
        for token in tokenize(text) {
            any = true;
            if let Some(v) = self.vectors.get(&token) {
                known += 1;
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        if !any {
            return Err(promptfuse_core::Error::EmptyPrompt);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if known == 0 || norm == 0.0 {
            return Err(promptfuse_core::Error::Range(format!("no known word vectors in `{text}`")));
        }
        acc.iter_mut().for_each(|a| *a /= norm);
        PromptEmbedding::new(acc, text.into())
    }
}

/// Seed of the stub backend; fixed so that training and fusion agree.
pub const STUB_SEED: u64 = 0;

/// The word-vector backend when `path` is given, else the stub. The backend's
/// dimension must equal `prompt_dim`.
pub fn select_encoder(path: Option<&Path>, prompt_dim: usize) -> Result<Box<dyn PromptEncoder>> {
    let Some(path) = path else {
        return Ok(Box::new(StubEncoder::new(prompt_dim, STUB_SEED)));
    };
    let enc = WordVectorEncoder::load(path)?;
    if enc.dim() != prompt_dim {
        return Err(Error::Encoder(format!(
            "{} holds {}-dimensional vectors, the network expects {prompt_dim}",
            path.display(),
            enc.dim()
        )));
    }
    Ok(Box::new(enc))
}
