//! Chromatic self-attention: per-channel attention filters over node pairs,
//! biased by encoded edge features and applied to value messages enriched
//! with edge values.

mod edge;
mod layer;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};

pub use edge::{EdgeEncoder, EdgeEncoderConfig, EdgeInputs, EdgeProjection, EdgeVars, RpeInput};
pub use layer::{head_block_matrix, CsaLayer, GraphSlot, LayerConfig, LayerOutput, RunningStats};
pub use reference::{
    attention_dropout, chromatic_logits, chromatic_scores, csa_update, normalize_filters,
    per_head_mean, sample_attention_mask, AttentionMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// One scalar score per head; the edge bias is the head mean.
    Monochrome,
    /// One score per channel; the edge bias varies per channel.
    Chromatic,
    /// `exp(Q_i + K_j + E_ij)` with no head split.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutKind {
    None,
    NodeAblation,
    EdgeAblation,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMode {
    pub variant: AttentionVariant,
    pub dropout: DropoutKind,
    pub p_drop: f64,
}

impl AttentionMode {
    pub fn new(variant: AttentionVariant) -> Self {
        AttentionMode {
            variant,
            dropout: DropoutKind::None,
            p_drop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(CgtError::Config(format!(
                "attention dropout {} outside [0, 1)",
                self.p_drop
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    #[default]
    Batch,
    Layer,
}
