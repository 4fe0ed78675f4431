//! Run configuration: a sectioned key=value file (TOML) with a full default
//! for every key. Unknown keys are errors; parse → serialize → parse is the
//! identity.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::SynthConfig;
use crate::encoders::{EcgEmbedConfig, ImageEmbedConfig, LoraConfig, VitConfig};
use crate::model::ModelConfig;
use crate::objective::ProjectionConfig;
use crate::pipeline::PrepareConfig;
use crate::preprocess::AugmentConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config value error: {0}")]
    Value(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root: payload paths in manifests resolve against it.
    pub dir: String,
    pub manifest: String,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Raw generated ECG geometry; preprocessing resamples to 100 Hz.
    pub ecg_raw_len: usize,
    pub ecg_raw_rate: f64,
    pub max_gap_days: i64,
    pub min_token_freq: usize,
    pub clahe_tiles: usize,
    pub clahe_clip: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: "data/synth".into(),
            manifest: "manifest.tsv".into(),
            classes: 3,
            per_class: 100,
            image_size: 64,
            ecg_raw_len: 5000,
            ecg_raw_rate: 500.0,
            max_gap_days: 60,
            min_token_freq: 1,
            clahe_tiles: 8,
            clahe_clip: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub qkv_bias: bool,
    pub dropkey_first: f64,
    pub dropkey_last: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub freeze_text_base: bool,
    pub text_max_len: usize,
    pub ecg_mid_channels: usize,
    pub ecg_kernel1: usize,
    pub ecg_stride1: usize,
    pub ecg_kernel2: usize,
    pub ecg_stride2: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            depth: 4,
            heads: 4,
            dim: 128,
            mlp_ratio: 4,
            patch_size: 16,
            qkv_bias: false,
            dropkey_first: 0.1,
            dropkey_last: 0.0,
            proj_hidden: 128,
            proj_out: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
            freeze_text_base: true,
            text_max_len: 512,
            ecg_mid_channels: 64,
            ecg_kernel1: 15,
            ecg_stride1: 5,
            ecg_kernel2: 7,
            ecg_stride2: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub bn_momentum: f64,
    pub finetune_mode: String,
    pub k_last_layers: usize,
    pub finetune_lr: f64,
    pub finetune_weight_decay: f64,
    pub finetune_epochs: usize,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    pub aug_scale_prob: f64,
    pub aug_jitter_max: f64,
    pub aug_jitter_prob: f64,
    pub aug_blur_kmin: usize,
    pub aug_blur_kmax: usize,
    pub aug_blur_prob: f64,
    pub aug_warp_segments: usize,
    pub aug_warp_factor: f64,
    pub aug_permute_segments: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        TrainSection {
            lr: 1e-3,
            weight_decay: 0.1,
            accumulation_steps: 4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            val_fraction: 0.1,
            bn_momentum: 0.1,
            finetune_mode: "linear_probe".into(),
            k_last_layers: 1,
            finetune_lr: 1e-3,
            finetune_weight_decay: 0.02,
            finetune_epochs: 30,
            aug_scale_lo: aug.scale_range.0,
            aug_scale_hi: aug.scale_range.1,
            aug_scale_prob: aug.scale_prob,
            aug_jitter_max: aug.jitter_max,
            aug_jitter_prob: aug.jitter_prob,
            aug_blur_kmin: aug.blur_kernel_range.0,
            aug_blur_kmax: aug.blur_kernel_range.1,
            aug_blur_prob: aug.blur_prob,
            aug_warp_segments: aug.warp_segments,
            aug_warp_factor: aug.warp_factor,
            aug_permute_segments: aug.permute_segments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub top_k: usize,
    pub fusion_weight: f64,
    pub fused_max_gap_days: i64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            top_k: 5,
            fusion_weight: 0.5,
            fused_max_gap_days: 3,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialized form (the digest input).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.finalize().into()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            scale_range: (self.train.aug_scale_lo, self.train.aug_scale_hi),
            scale_prob: self.train.aug_scale_prob,
            jitter_max: self.train.aug_jitter_max,
            jitter_prob: self.train.aug_jitter_prob,
            blur_kernel_range: (self.train.aug_blur_kmin, self.train.aug_blur_kmax),
            blur_prob: self.train.aug_blur_prob,
            warp_segments: self.train.aug_warp_segments,
            warp_factor: self.train.aug_warp_factor,
            permute_segments: self.train.aug_permute_segments,
            seed: self.train.seed,
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_classes: self.data.classes,
            n_per_class: self.data.per_class,
            image_size: self.data.image_size,
            ecg_len: self.data.ecg_raw_len,
            ecg_rate_hz: self.data.ecg_raw_rate,
            seed,
        }
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            target_hz: 100.0,
            clahe_tiles: (self.data.clahe_tiles, self.data.clahe_tiles),
            clahe_clip: self.data.clahe_clip,
            min_token_freq: self.data.min_token_freq,
            max_gap_days: self.data.max_gap_days,
        }
    }

    /// The working ECG length after resampling to 100 Hz.
    pub fn working_ecg_len(&self) -> usize {
        ((self.data.ecg_raw_len as f64) * 100.0 / self.data.ecg_raw_rate).round() as usize
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let lora = if m.lora_rank == 0 {
            None
        } else {
            Some(LoraConfig {
                rank: m.lora_rank,
                alpha: m.lora_alpha,
                freeze_base: m.freeze_text_base,
            })
        };
        Ok(ModelConfig {
            vit: VitConfig {
                depth: m.depth,
                heads: m.heads,
                model_dim: m.dim,
                mlp_ratio: m.mlp_ratio,
                qkv_bias: m.qkv_bias,
                dropkey_rate_first: m.dropkey_first,
                dropkey_rate_last: m.dropkey_last,
            },
            image: ImageEmbedConfig {
                model_dim: m.dim,
                patch_size: m.patch_size,
            },
            ecg_embed: EcgEmbedConfig {
                model_dim: m.dim,
                mid_channels: m.ecg_mid_channels,
                kernel1: m.ecg_kernel1,
                stride1: m.ecg_stride1,
                kernel2: m.ecg_kernel2,
                stride2: m.ecg_stride2,
            },
            proj: ProjectionConfig {
                in_dim: m.dim,
                hidden: m.proj_hidden,
                out_dim: m.proj_out,
            },
            lora,
            image_size: self.data.image_size,
            ecg_len: self.working_ecg_len(),
            text_max_len: m.text_max_len,
            seed: self.train.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            accumulation_steps: self.train.accumulation_steps,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.train.seed,
            val_fraction: self.train.val_fraction,
            bn_momentum: self.train.bn_momentum,
            augment: self.augment_config(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_identically() {
        let cfg = RunConfig::default();
        let text = cfg.canonical();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(reparsed.canonical(), text);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("[data]\nclasses = 3\nbogus_key = 1\n");
        assert!(err.is_err());
        let err = RunConfig::parse("[nonexistent_section]\nx = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = RunConfig::parse("[train]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.data.classes, 3);
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.train.lr = 0.5;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn working_ecg_len_matches_resampling() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.working_ecg_len(), 1000);
    }
}
