//! Toy audio-language regressor: a frozen transformer base with optional NF4
//! quantization, LoRA adapters on the attention query/value projections and
//! a sigmoid regression head.

mod checkpoint;
mod head;
mod lora;
mod model;
mod nf4;
pub(crate) mod ops;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, ADAPTER_FILE, BASE_FILE};
pub use head::RegressionHead;
pub use lora::{lora_apply, LoraAdapter, LORA_INIT_STD};
pub use model::{BaseLayer, BaseModel, EncodedInput, LayerAdapters, Mode, Model, TrainableParams, MAX_TEXT_POS};
pub use nf4::{dequantize_nf4, nearest_code, nf4_half_max_gap, quantize_nf4, QuantizedWeight, NF4_BLOCK, NF4_LEVELS};

use crate::windowing::vocab;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at position {position} is outside the vocabulary")]
    Vocab { token: u16, position: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite values in {stage}")]
    NonFinite { stage: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// 0 turns adapters off.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub quantize_base: bool,
    pub head_only: bool,
    pub n_audio_tokens: usize,
    pub ffn_mult: usize,
    pub head_hidden: usize,
    /// Seed of the frozen base weights, shared by every run that should see
    /// the same base.
    pub base_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: vocab::SIZE,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            quantize_base: false,
            head_only: false,
            n_audio_tokens: 60,
            ffn_mult: 4,
            head_hidden: 64,
            base_seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn lora(rank: usize) -> Self {
        Self { lora_rank: rank, lora_alpha: 2.0 * rank as f64, ..Self::default() }
    }

    pub fn head_only() -> Self {
        Self { lora_rank: 0, lora_alpha: 0.0, head_only: true, ..Self::default() }
    }

    pub fn has_adapters(&self) -> bool {
        !self.head_only && self.lora_rank > 0
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: &str| Err(NetError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.n_audio_tokens == 0 || self.ffn_mult == 0 || self.head_hidden == 0 {
            return err("n_layers, n_audio_tokens, ffn_mult and head_hidden must be positive");
        }
        if self.vocab_size < vocab::SIZE {
            return err("vocab_size must cover bytes and special tokens");
        }
        if !self.head_only {
            if self.lora_rank == 0 {
                return err("lora_rank 0 without head_only leaves nothing to train");
            }
            if self.lora_alpha != 2.0 * self.lora_rank as f64 {
                return err("lora_alpha must equal 2 * lora_rank");
            }
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return err("lora_dropout must be in [0, 1)");
        }
        Ok(())
    }
}
