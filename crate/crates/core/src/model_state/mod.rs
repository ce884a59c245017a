//! Per-step decoder state, the sources that produce it, and the `AGMTRACE`
//! file format.

mod toy;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RealMatrix, RealVector};

pub use toy::{ToyModel, ToyModelConfig};
pub use trace::{read_trace, trace_from_reader, trace_to_writer, write_trace, Trace, TRACE_FORMAT, TRACE_VERSION};

/// Vocabulary size, embedding width and vision token count of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_vision: usize,
}

impl ModelSpec {
    pub fn new(vocab_size: usize, embed_dim: usize, n_vision: usize) -> Result<Self> {
        let spec = Self { vocab_size, embed_dim, n_vision };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidSpec(format!("vocab_size {} exceeds u32 ids", self.vocab_size)));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidSpec("embed_dim must be >= 1".into()));
        }
        if self.n_vision == 0 {
            return Err(Error::InvalidSpec("n_vision must be >= 1".into()));
        }
        Ok(())
    }

    /// Previous-token id used when there is no prefix.
    pub fn sentinel_token(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange { token, vocab_size: self.vocab_size })
        }
    }
}

/// One decoding step's model internals.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    /// Pre-softmax next-token logits, one per vocabulary entry.
    pub logits: RealVector,
    /// Last-layer attention from the current position to each vision token,
    /// aggregated over heads and renormalized.
    pub vision_attention: RealVector,
    /// Last-layer hidden state at the current position.
    pub hidden: RealVector,
}

impl StepState {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{name} has length {got}, expected {want}")))
            }
        };
        check("logits", self.logits.len(), spec.vocab_size)?;
        check("vision_attention", self.vision_attention.len(), spec.n_vision)?;
        check("hidden", self.hidden.len(), spec.embed_dim)?;
        check_attention(&self.vision_attention)
    }
}

pub(crate) fn check_attention(attention: &[f32]) -> Result<()> {
    if attention.iter().any(|&a| a < 0.0) {
        return Err(Error::NotADistribution("negative vision attention".into()));
    }
    let total: f64 = attention.iter().map(|&a| f64::from(a)).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotADistribution(format!("vision attention sums to {total}")));
    }
    Ok(())
}

/// Anything that can hand the watermark engine a [`StepState`] for a prefix.
///
/// Implementations are read-only after construction and are shared across
/// worker threads.
pub trait ModelSource: Sync {
    fn spec(&self) -> ModelSpec;

    /// Text embedding table, `vocab_size x embed_dim`.
    fn text_embeddings(&self) -> &RealMatrix;

    /// Vision token embeddings, `n_vision x embed_dim`.
    fn vision_embeddings(&self) -> &RealMatrix;

    /// State after consuming `prefix`. `Ok(None)` means the source has no
    /// state for this position (a recorded trace ran out).
    fn step(&self, prefix: &[u32]) -> Result<Option<StepState>>;

    /// Identifies the model (toy configuration or trace contents).
    fn fingerprint(&self) -> u64;

    /// Number of positions the source can serve, if bounded.
    fn horizon(&self) -> Option<usize> {
        None
    }
}
