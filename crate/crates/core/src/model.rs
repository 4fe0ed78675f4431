//! Full tri-modal model assembly: three encoders, three projection heads
//! and the learnable temperature, over one parameter store.

use rand_chacha::ChaCha8Rng;

use crate::data::Tokenizer;
use crate::encoders::{
    ecg_patch_embed, image_patch_embed, init_ecg_patch, init_image_patch, init_text_encoder,
    init_transformer, text_encode, transformer_forward, EcgEmbedConfig, EncoderOutput, Graph,
    ImageEmbedConfig, LoraConfig, ParamStore, TextConfig, VitConfig,
};
use crate::objective::{
    init_projection_head, project, total_loss, ProjectionConfig, TemperatureParam,
};
use crate::preprocess::EcgRecord;
use crate::rng::stream;
use crate::tensor::{Mode, Tensor, TensorId, TensorResult};

pub const IMG: &str = "img";
pub const ECG: &str = "ecg";
pub const TEXT: &str = "text";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub image: ImageEmbedConfig,
    pub ecg_embed: EcgEmbedConfig,
    pub proj: ProjectionConfig,
    pub lora: Option<LoraConfig>,
    pub image_size: usize,
    /// Working ECG length after preprocessing (12×1000 @ 100 Hz).
    pub ecg_len: usize,
    pub text_max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vit = VitConfig::default();
        ModelConfig {
            image: ImageEmbedConfig {
                model_dim: vit.model_dim,
                patch_size: 16,
            },
            ecg_embed: EcgEmbedConfig {
                model_dim: vit.model_dim,
                mid_channels: vit.model_dim / 2,
                ..EcgEmbedConfig::default()
            },
            proj: ProjectionConfig {
                in_dim: vit.model_dim,
                ..ProjectionConfig::default()
            },
            lora: Some(LoraConfig::default()),
            image_size: 64,
            ecg_len: 1000,
            text_max_len: 512,
            seed: 0,
            vit,
        }
    }
}

impl ModelConfig {
    pub fn text_config(&self, vocab_size: usize) -> TextConfig {
        TextConfig::new(self.vit.clone(), vocab_size, self.text_max_len)
    }
}

/// One prepared micro-batch: normalized images, preprocessed (and possibly
/// augmented) ECG records, and joined report token ids, index-aligned.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub images: Vec<Tensor>,
    pub ecgs: Vec<EcgRecord>,
    pub token_ids: Vec<Vec<u32>>,
}

impl BatchInput {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Projected unit embeddings for one batch, plus the attention probes the
/// explainer reads.
pub struct TriOutputs {
    pub z_text: TensorId,
    pub z_xray: TensorId,
    pub z_ecg: TensorId,
    pub img_probe: crate::encoders::AttentionProbe,
    pub ecg_probe: crate::encoders::AttentionProbe,
    pub text_probe: crate::encoders::AttentionProbe,
}

pub struct MoreModel {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
}

impl MoreModel {
    /// Builds and initializes all parameters (deterministic per cfg.seed).
    pub fn init(cfg: ModelConfig, tokenizer: Tokenizer) -> TensorResult<Self> {
        cfg.vit.validate()?;
        let mut store = ParamStore::new();
        let mut rng: ChaCha8Rng = stream(cfg.seed, "model-init", &[]);
        let n_patches = cfg.image.tokens(cfg.image_size, cfg.image_size);
        init_image_patch(&mut store, IMG, &cfg.image, n_patches, &mut rng)?;
        init_transformer(&mut store, IMG, &cfg.vit, &mut rng)?;
        init_ecg_patch(&mut store, ECG, &cfg.ecg_embed, cfg.ecg_len, &mut rng)?;
        init_transformer(&mut store, ECG, &cfg.vit, &mut rng)?;
        let text_cfg = cfg.text_config(tokenizer.vocab_size());
        init_text_encoder(&mut store, TEXT, &text_cfg, cfg.lora.as_ref(), &mut rng)?;
        init_projection_head(&mut store, "proj.img", &cfg.proj, &mut rng)?;
        init_projection_head(&mut store, "proj.ecg", &cfg.proj, &mut rng)?;
        init_projection_head(&mut store, "proj.text", &cfg.proj, &mut rng)?;
        TemperatureParam::init(&mut store)?;
        Ok(MoreModel {
            store,
            cfg,
            tokenizer,
        })
    }

    pub fn tau(&self) -> f64 {
        TemperatureParam::tau(&self.store)
    }

    /// Image encoder: patch embed → trunk → CLS.
    pub fn encode_images(
        &self,
        g: &mut Graph,
        images: &[Tensor],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<EncoderOutput> {
        let (tokens, seq) = image_patch_embed(g, &self.store, IMG, images, &self.cfg.image)?;
        transformer_forward(
            g,
            &self.store,
            IMG,
            tokens,
            images.len(),
            seq,
            &self.cfg.vit,
            None,
            mode,
            rng,
            None,
        )
    }

    /// ECG encoder: conv patch embed → trunk → CLS.
    pub fn encode_ecgs(
        &self,
        g: &mut Graph,
        ecgs: &[EcgRecord],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<EncoderOutput> {
        let (tokens, seq) = ecg_patch_embed(g, &self.store, ECG, ecgs, &self.cfg.ecg_embed, mode)?;
        transformer_forward(
            g,
            &self.store,
            ECG,
            tokens,
            ecgs.len(),
            seq,
            &self.cfg.vit,
            None,
            mode,
            rng,
            None,
        )
    }

    /// Text encoder over joined-report token ids.
    pub fn encode_texts(
        &self,
        g: &mut Graph,
        token_ids: &[Vec<u32>],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<EncoderOutput> {
        let cfg = self.cfg.text_config(self.tokenizer.vocab_size());
        text_encode(
            g,
            &self.store,
            TEXT,
            token_ids,
            &cfg,
            mode,
            rng,
            self.cfg.lora.as_ref(),
        )
    }

    /// Encoder CLS for one modality projected into the shared space.
    pub fn project_cls(
        &self,
        g: &mut Graph,
        prefix: &str,
        cls: TensorId,
        mode: Mode,
    ) -> TensorResult<TensorId> {
        project(g, &self.store, &format!("proj.{prefix}"), cls, mode)
    }

    /// All three modalities through encoders and heads.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        batch: &BatchInput,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<TriOutputs> {
        let img_out = self.encode_images(g, &batch.images, mode, rng)?;
        let ecg_out = self.encode_ecgs(g, &batch.ecgs, mode, rng)?;
        let text_out = self.encode_texts(g, &batch.token_ids, mode, rng)?;
        let z_xray = self.project_cls(g, IMG, img_out.cls, mode)?;
        let z_ecg = self.project_cls(g, ECG, ecg_out.cls, mode)?;
        let z_text = self.project_cls(g, TEXT, text_out.cls, mode)?;
        Ok(TriOutputs {
            z_text,
            z_xray,
            z_ecg,
            img_probe: img_out.probe,
            ecg_probe: ecg_out.probe,
            text_probe: text_out.probe,
        })
    }

    /// The pre-training objective for one micro-batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &BatchInput,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<TensorId> {
        let out = self.encode_batch(g, batch, mode, rng)?;
        let tau = TemperatureParam::bind(g, &self.store)?;
        total_loss(g, out.z_text, out.z_xray, out.z_ecg, tau)
    }
}
