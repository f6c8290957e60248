use std::fmt;

use crate::error::{invalid, LabError, Result};

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnMode {
    #[default]
    Causal,
    Full,
    /// Causal across blocks of the given size, bidirectional within a block.
    BlockCausal(usize),
}

impl AttnMode {
    /// Whether query row `i` may attend to key row `j` (0-based).
    #[inline]
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            AttnMode::Causal => j <= i,
            AttnMode::Full => true,
            AttnMode::BlockCausal(k) => j / k <= i / k,
        }
    }

    /// Dense `[len, len]` allow matrix, row-major.
    pub fn allow_matrix(self, len: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(len * len);
        for i in 0..len {
            out.extend((0..len).map(|j| self.allows(i, j)));
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttnMode::Causal),
            "full" => Ok(AttnMode::Full),
            _ => {
                let k = s
                    .strip_prefix("block_causal:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| invalid(format!("unknown attention mode '{s}'")))?;
                Ok(AttnMode::BlockCausal(k))
            }
        }
    }
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnMode::Causal => f.write_str("causal"),
            AttnMode::Full => f.write_str("full"),
            AttnMode::BlockCausal(k) => write!(f, "block_causal:{k}"),
        }
    }
}

/// Shape of the transformer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Native attention mode; forwards may override it per call.
    pub attn_mode: AttnMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 128,
            vocab_size: crate::corpus::Vocab::BYTE_LEVEL.size,
            attn_mode: AttnMode::Causal,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: usize, reason: &str| LabError::InvalidValue {
            key: format!("model.{key}"),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        if self.n_layers == 0 {
            return Err(bad("n_layers", self.n_layers, "must be at least 1"));
        }
        if self.n_heads == 0 {
            return Err(bad("n_heads", self.n_heads, "must be at least 1"));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(bad("d_model", self.d_model, "must be a positive multiple of n_heads"));
        }
        if self.d_ff == 0 {
            return Err(bad("d_ff", self.d_ff, "must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(bad("max_len", self.max_len, "must be at least 2"));
        }
        if self.vocab_size < 2 || self.vocab_size > usize::from(u16::MAX) + 1 {
            return Err(bad("vocab_size", self.vocab_size, "must be in 2..=65536"));
        }
        if let AttnMode::BlockCausal(k) = self.attn_mode {
            if k == 0 || self.max_len % k != 0 {
                return Err(bad("attn_mode", k, "block size must divide max_len"));
            }
        }
        Ok(())
    }
}
