//! Prefix-LM transformer: token/type/role embeddings, rotary positions,
//! bidirectional attention over the input prefix with causal attention over
//! the output region, and masked NLL loss.

mod forward;
mod mask;
mod params;
mod rope;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;
use crate::tokenizer::TokenId;

pub use forward::{build_forward, embed, forward, nll_loss, shifted_targets, ForwardGraph};
pub use mask::{build_prefix_mask, AttentionMask};
pub use params::Parameters;
pub use rope::{apply_rope, rope_tables};

/// Segment tags distinguishing the four token groups in a sequence.
pub const TYPE_CONTEXT: u32 = 0;
pub const TYPE_QUERY: u32 = 1;
pub const TYPE_KNOWLEDGE: u32 = 2;
pub const TYPE_RESPONSE: u32 = 3;
pub const TYPE_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{array}[{index}] = {id} out of range (limit {limit})")]
    IdOutOfRange {
        array: &'static str,
        index: usize,
        id: u32,
        limit: usize,
    },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("prefix length {prefix_len} exceeds total length {total_len}")]
    PrefixExceedsLength {
        prefix_len: usize,
        total_len: usize,
    },
    #[error("rotary encoding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("unknown tensor '{0}'")]
    UnknownTensor(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Shape hyperparameters of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub type_count: usize,
    pub role_count: usize,
    pub rope_base: f64,
    /// Train-mode dropout probability; 0 keeps runs deterministic.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// Default configuration sized for a desktop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 4,
            embed_dim: 128,
            ffn_dim: 512,
            heads: 4,
            vocab_size: 2048,
            max_len: 256,
            type_count: TYPE_COUNT,
            role_count: 8,
            rope_base: 10000.0,
            dropout: 0.0,
        }
    }

    /// The reference full-scale configuration (48 blocks, 6144-dim
    /// embeddings, 24576-dim feedforward, 32K vocabulary, 1024 context).
    /// Shipped for documentation; never instantiated by the test suite.
    /// Head count is our choice — the reference leaves it unstated.
    pub fn full_scale_reference() -> Self {
        ModelConfig {
            layers: 48,
            embed_dim: 6144,
            ffn_dim: 24576,
            heads: 48,
            vocab_size: 32000,
            max_len: 1024,
            type_count: TYPE_COUNT,
            role_count: 32,
            rope_base: 10000.0,
            dropout: 0.0,
        }
    }

    /// Two-layer, 16-dim model small enough for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 16,
            ffn_dim: 32,
            heads: 2,
            vocab_size: 32,
            max_len: 32,
            type_count: TYPE_COUNT,
            role_count: 4,
            rope_base: 10000.0,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return fail("layers, heads, embed_dim, ffn_dim must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even", self.head_dim()));
        }
        if self.type_count != TYPE_COUNT {
            return fail(format!("type_count must be {TYPE_COUNT}"));
        }
        if self.role_count == 0 || self.max_len == 0 {
            return fail("role_count and max_len must be positive".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// One tokenized training or inference sequence: parallel token/type/role/
/// position arrays, the prefix boundary, and the loss mask over prediction
/// positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub types: Vec<u32>,
    pub roles: Vec<u32>,
    pub positions: Vec<usize>,
    pub prefix_len: usize,
    pub loss_mask: Vec<bool>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let len = self.tokens.len();
        if len == 0 {
            return Err(ModelError::InvalidSequence("empty sequence".into()));
        }
        if self.types.len() != len
            || self.roles.len() != len
            || self.positions.len() != len
            || self.loss_mask.len() != len
        {
            return Err(ModelError::InvalidSequence(format!(
                "parallel arrays disagree: {} tokens, {} types, {} roles, {} positions, {} mask",
                len,
                self.types.len(),
                self.roles.len(),
                self.positions.len(),
                self.loss_mask.len()
            )));
        }
        if len > cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max_len: cfg.max_len,
            });
        }
        if self.prefix_len > len {
            return Err(ModelError::PrefixExceedsLength {
                prefix_len: self.prefix_len,
                total_len: len,
            });
        }
        for (index, &id) in self.tokens.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    array: "tokens",
                    index,
                    id,
                    limit: cfg.vocab_size,
                });
            }
        }
        for (index, &id) in self.types.iter().enumerate() {
            if id as usize >= cfg.type_count {
                return Err(ModelError::IdOutOfRange {
                    array: "types",
                    index,
                    id,
                    limit: cfg.type_count,
                });
            }
        }
        for (index, &id) in self.roles.iter().enumerate() {
            if id as usize >= cfg.role_count {
                return Err(ModelError::IdOutOfRange {
                    array: "roles",
                    index,
                    id: id,
                    limit: cfg.role_count,
                });
            }
        }
        if self.loss_mask[..self.prefix_len].iter().any(|&m| m) {
            return Err(ModelError::InvalidSequence(
                "loss mask set inside the prefix".into(),
            ));
        }
        Ok(())
    }
}
