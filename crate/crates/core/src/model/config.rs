use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which axis the aggregation-query softmax normalises over in the OD embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedSoftmax {
    /// Over the queries for each row, as written. Each row's weights then sum
    /// to one across queries and the aggregation reduces to a plain row sum.
    #[default]
    Queries,
    /// Over the M rows for each query (attention pooling).
    Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Fine cells N.
    pub n_cells: usize,
    /// Super-cells M.
    pub n_super: usize,
    /// History length K.
    pub k: usize,
    /// Horizon tau.
    pub tau: usize,
    /// Embedding width d.
    pub d: usize,
    pub heads: usize,
    /// Aggregation queries N_q.
    pub n_queries: usize,
    /// POI categories p.
    pub poi_dim: usize,
    /// Hidden width of the encoder/decoder feed-forward blocks.
    pub ffn_hidden: usize,
    /// Hidden channels of the per-pair 1x1 convolution head; 0 makes the head
    /// a single linear map of the concatenated pair features.
    pub pair_hidden: usize,
    pub embed_softmax: EmbedSoftmax,
    /// Renormalise masked decoder attention rows to sum to one.
    pub renorm_mask: bool,
    /// Feed `ln(1 + x)` of the coarse history to the embedding.
    pub log_input: bool,
    /// Scale the point forecast by `1 - pi`.
    pub zero_inflated_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_cells: 640,
            n_super: 60,
            k: 8,
            tau: 1,
            d: 64,
            heads: 4,
            n_queries: 32,
            poi_dim: 8,
            ffn_hidden: 128,
            pair_hidden: 32,
            embed_softmax: EmbedSoftmax::Queries,
            renorm_mask: false,
            log_input: false,
            zero_inflated_mean: false,
        }
    }
}

impl ModelConfig {
    /// Per-head width `floor(d / h)`.
    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cells == 0 || self.n_super == 0 || self.n_super > self.n_cells {
            return bad(format!(
                "need 1 <= n_super <= n_cells, got n_super={} n_cells={}",
                self.n_super, self.n_cells
            ));
        }
        if self.k == 0 || self.tau == 0 {
            return bad("history k and horizon tau must be positive".into());
        }
        if self.heads == 0 || self.d < self.heads {
            return bad(format!("need d >= heads >= 1, got d={} heads={}", self.d, self.heads));
        }
        if self.n_queries == 0 || self.ffn_hidden == 0 {
            return bad("n_queries and ffn_hidden must be positive".into());
        }
        Ok(())
    }
}
