//! Encoder-decoder Transformer with dual-attention feature fusion.

mod checkpoint;
mod decode;
mod network;
mod optim;
mod provider;
pub mod tape;
pub mod tensor;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use decode::{beam_search, generate, generate_ids, greedy, DecodeConfig};
pub use network::{Attention, EncoderLayer, FeatureAttention, Seq2Seq};
pub use optim::{inverse_sqrt_lr, Adam, AdamConfig};
pub use provider::{FeatureProvider, MaskedEncoder, PretrainConfig, RandomFeatures};
pub use tape::{log_softmax_rows, smoothed_nll, Gradients, ParamStore, Tape};
pub use tensor::Matrix;
pub use train::{
    batches_by_tokens, encode_examples, example_gradients, predict_all, train, train_step, EncodedExample, TrainConfig,
    TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::TripletOrder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub label_smoothing: f64,
    pub order: TripletOrder,
    pub fusion: bool,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            dim: 256,
            heads: 4,
            ffn_dim: 1024,
            dropout: 0.2,
            attn_dropout: 0.1,
            label_smoothing: 0.2,
            order: TripletOrder::default(),
            fusion: true,
            max_source_len: 512,
            max_target_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        for (name, v) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = ModelConfig::default();
        assert_eq!((c.layers, c.dim, c.dropout, c.attn_dropout, c.label_smoothing), (2, 256, 0.2, 0.1, 0.2));
        c.validate().unwrap();
        let bad = ModelConfig { heads: 3, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { dropout: 1.0, ..c };
        assert!(bad.validate().is_err());
    }
}
