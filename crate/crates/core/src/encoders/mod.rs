//! Modality encoders: a ViT trunk shared by images (16×16 patch projection)
//! and ECG (two-stage strided convolution embedding), plus a text
//! transformer whose q/k/v projections carry LoRA adapters.

mod attention;
mod lora;
mod params;
mod patch;
#[cfg(test)]
mod tests;
mod text;
mod vit;

pub use attention::{
    dropkey_attention, dropkey_schedule, multi_head_attention, AttentionProbe,
};
pub use lora::{init_lora, linear_lora, LoraConfig};
pub use params::{apply_bn_updates, Graph, ParamEntry, ParamStore};
pub use patch::{
    ecg_patch_embed, image_patch_embed, init_ecg_patch, init_image_patch, unfold_images,
    EcgEmbedConfig, ImageEmbedConfig,
};
pub(crate) use patch::batch_norm_layer;
pub use text::{init_text_encoder, text_encode, TextConfig};
pub use vit::{init_transformer, transformer_forward, EncoderOutput};

use crate::tensor::{TensorError, TensorResult};

/// Transformer trunk settings shared by all three encoders. The desk-scale
/// defaults (depth 4, heads 4, dim 128) train in minutes on a CPU; the
/// full-size 12/12/768 remains selectable.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    pub qkv_bias: bool,
    pub dropkey_rate_first: f64,
    pub dropkey_rate_last: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            depth: 4,
            heads: 4,
            model_dim: 128,
            mlp_ratio: 4,
            qkv_bias: false,
            dropkey_rate_first: 0.1,
            dropkey_rate_last: 0.0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.heads == 0 || self.model_dim == 0 {
            return Err(TensorError::Param("heads and model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(TensorError::Param(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        for r in [self.dropkey_rate_first, self.dropkey_rate_last] {
            if !(0.0..=1.0).contains(&r) {
                return Err(TensorError::Param(format!("dropkey rate {r} outside [0,1]")));
            }
        }
        if self.dropkey_rate_first < self.dropkey_rate_last {
            return Err(TensorError::Param(
                "dropkey_rate_first must be >= dropkey_rate_last".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }
}
