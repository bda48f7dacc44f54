use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network dimensions and loss weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Location embedding width.
    pub d_el: usize,
    /// Duration embedding width.
    pub d_et: usize,
    /// Daily location representation width; also the spatial decoder width.
    pub d_hl: usize,
    /// Daily duration representation width; also the temporal decoder width.
    pub d_ht: usize,
    pub d_zl: usize,
    pub d_zt: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_gnn_layers: usize,
    /// Feed-forward hidden width as a multiple of the block width.
    pub ff_mult: usize,
    pub lambda: f64,
    pub slots_per_day: usize,
    /// Longest decoded location chain; defaults to `slots_per_day`.
    pub max_chain_len: Option<usize>,
    /// Negative slope inside the flow-attention logits.
    pub attn_slope: f64,
    /// Negative slope of the per-layer graph activation.
    pub gnn_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_el: 512,
            d_et: 512,
            d_hl: 1024,
            d_ht: 512,
            d_zl: 1024,
            d_zt: 512,
            n_heads: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_gnn_layers: 2,
            ff_mult: 4,
            lambda: 1.0,
            slots_per_day: 24,
            max_chain_len: None,
            attn_slope: 0.2,
            gnn_slope: 0.01,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk(slots_per_day: usize) -> Self {
        Self {
            d_el: 32,
            d_et: 32,
            d_hl: 64,
            d_ht: 32,
            d_zl: 64,
            d_zt: 32,
            n_heads: 4,
            ff_mult: 2,
            slots_per_day,
            ..Self::default()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn micro(slots_per_day: usize) -> Self {
        Self {
            d_el: 4,
            d_et: 4,
            d_hl: 8,
            d_ht: 4,
            d_zl: 8,
            d_zt: 4,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_gnn_layers: 2,
            ff_mult: 2,
            slots_per_day,
            ..Self::default()
        }
    }

    pub fn max_chain_len(&self) -> usize {
        self.max_chain_len.unwrap_or(self.slots_per_day)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dim) in [("d_hl", self.d_hl), ("d_ht", self.d_ht), ("d_zl", self.d_zl), ("d_zt", self.d_zt)] {
            if dim == 0 || self.n_heads == 0 || dim % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "{name} = {dim} is not divisible by n_heads = {}",
                    self.n_heads
                )));
            }
        }
        if self.d_el == 0 || self.d_et == 0 || self.ff_mult == 0 {
            return Err(Error::Config("embedding and feed-forward widths must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.slots_per_day == 0 {
            return Err(Error::Config("slots_per_day must be positive".into()));
        }
        let m = self.max_chain_len();
        if m == 0 || m > self.slots_per_day {
            return Err(Error::Config(format!(
                "max_chain_len {m} must lie in 1..={}",
                self.slots_per_day
            )));
        }
        Ok(())
    }
}

/// Location vocabulary: cells followed by the special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_cells: usize,
}

impl Vocab {
    pub fn sos(self) -> usize {
        self.n_cells
    }

    pub fn eos(self) -> usize {
        self.n_cells + 1
    }

    pub fn pad(self) -> usize {
        self.n_cells + 2
    }

    pub fn size(self) -> usize {
        self.n_cells + 3
    }
}
