use crate::error::{CftError, Result};

/// Hyperparameters of one fusion transformer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CftConfig {
    /// Feature channels `C` of each modality; also the token width.
    pub channels: usize,
    pub heads: usize,
    /// Number of stacked attention + MLP blocks.
    pub blocks: usize,
    /// Side of the pooled grid; each modality contributes `P^2` tokens.
    pub pooled_size: usize,
    /// MLP hidden width as a multiple of `channels`.
    pub mlp_ratio: usize,
    /// Per-head `C x C` projections and a `(heads*C) x C` output matrix
    /// instead of splitting `C` across heads.
    pub paper_literal_heads: bool,
    /// Pre-norm LayerNorm before attention and MLP.
    pub use_layernorm: bool,
}

impl Default for CftConfig {
    fn default() -> Self {
        CftConfig {
            channels: 64,
            heads: 4,
            blocks: 8,
            pooled_size: 8,
            mlp_ratio: 2,
            paper_literal_heads: false,
            use_layernorm: false,
        }
    }
}

impl CftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(CftError::Config(
                "channels, heads and mlp_ratio must be positive".into(),
            ));
        }
        if self.blocks == 0 {
            return Err(CftError::Config("a fusion transformer needs at least one block".into()));
        }
        if self.pooled_size == 0 {
            return Err(CftError::Config("pooled_size must be at least 1".into()));
        }
        if !self.paper_literal_heads && self.channels % self.heads != 0 {
            return Err(CftError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Tokens per modality.
    pub fn tokens_per_modality(&self) -> usize {
        self.pooled_size * self.pooled_size
    }

    /// Length of the concatenated RGB + thermal sequence.
    pub fn sequence_len(&self) -> usize {
        2 * self.tokens_per_modality()
    }

    /// Width of the query/key vectors inside one head.
    pub fn head_dim(&self) -> usize {
        if self.paper_literal_heads {
            self.channels
        } else {
            self.channels / self.heads
        }
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.channels
    }
}
