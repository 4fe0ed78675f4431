//! Text encoder: token + positional embeddings into the shared transformer
//! trunk, with padding masked out of attention and LoRA adapters on the
//! q/k/v projections. Stands in for the pretrained clinical language model,
//! whose weights are out of scope here.

use rand_chacha::ChaCha8Rng;

use crate::data::PAD_ID;
use crate::tensor::{Mode, TensorError, TensorResult};

use super::lora::{init_lora, LoraConfig};
use super::params::{Graph, ParamStore};
use super::vit::{init_transformer, transformer_forward, EncoderOutput};
use super::VitConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub vit: VitConfig,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextConfig {
    pub fn new(vit: VitConfig, vocab_size: usize, max_len: usize) -> Self {
        // Text attends over everything it has; DropKey stays an image/ECG
        // regularizer.
        TextConfig {
            vit: VitConfig {
                dropkey_rate_first: 0.0,
                dropkey_rate_last: 0.0,
                ..vit
            },
            vocab_size,
            max_len,
        }
    }
}

/// Registers embeddings and trunk; wraps q/k/v with LoRA adapters when a
/// config is given (freezing base projections per its flag).
pub fn init_text_encoder(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TextConfig,
    lora: Option<&LoraConfig>,
    rng: &mut ChaCha8Rng,
) -> TensorResult<()> {
    let d = cfg.vit.model_dim;
    store.insert_randn(&format!("{prefix}.tok_emb"), vec![cfg.vocab_size, d], 0.02, rng)?;
    store.insert_randn(&format!("{prefix}.pos"), vec![cfg.max_len, d], 0.02, rng)?;
    init_transformer(store, prefix, &cfg.vit, rng)?;
    if let Some(lora_cfg) = lora {
        for l in 0..cfg.vit.depth {
            for proj in ["wq", "wk", "wv"] {
                init_lora(
                    store,
                    &format!("{prefix}.blocks.{l}.attn.{proj}"),
                    lora_cfg,
                    rng,
                )?;
            }
        }
        if lora_cfg.freeze_base {
            // The paper's PEFT setting: the whole language trunk is frozen,
            // only the adapters (and downstream heads) train.
            let pfx = format!("{prefix}.");
            store.set_trainable_where(
                |n| n.starts_with(&pfx) && !n.contains(".lora_"),
                false,
            );
        }
    }
    Ok(())
}

/// Encodes padded id sequences to CLS embeddings. Sequences must be
/// nonempty, contain at least one non-PAD token, fit `max_len`, and use ids
/// below the vocabulary size.
#[allow(clippy::too_many_arguments)]
pub fn text_encode(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    token_ids: &[Vec<u32>],
    cfg: &TextConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    lora: Option<&LoraConfig>,
) -> TensorResult<EncoderOutput> {
    if token_ids.is_empty() {
        return Err(TensorError::Param("empty text batch".into()));
    }
    let mut seq = 0usize;
    for (i, ids) in token_ids.iter().enumerate() {
        if ids.is_empty() || ids.iter().all(|&t| t == PAD_ID) {
            return Err(TensorError::Param(format!(
                "sequence {i} has no content tokens"
            )));
        }
        if ids.len() > cfg.max_len {
            return Err(TensorError::Param(format!(
                "sequence {i} length {} exceeds max_len {}",
                ids.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(TensorError::Param(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        seq = seq.max(ids.len());
    }
    let batch = token_ids.len();
    let mut gather: Vec<usize> = Vec::with_capacity(batch * seq);
    let mut pad_masks: Vec<Vec<bool>> = Vec::with_capacity(batch);
    for ids in token_ids {
        let mut pad_row = vec![false; seq];
        for t in 0..seq {
            if let Some(&id) = ids.get(t) {
                gather.push(id as usize);
                pad_row[t] = id == PAD_ID;
            } else {
                gather.push(PAD_ID as usize);
                pad_row[t] = true;
            }
        }
        pad_masks.push(pad_row);
    }
    let emb = g.param(store, &format!("{prefix}.tok_emb"))?;
    let tok = g.tape.gather_rows(emb, &gather)?;
    let pos_full = g.param(store, &format!("{prefix}.pos"))?;
    let pos = g.tape.slice_rows(pos_full, 0, seq)?;
    let x = g.tape.add_tiled(tok, pos, batch)?;
    transformer_forward(
        g,
        store,
        prefix,
        x,
        batch,
        seq,
        &cfg.vit,
        Some(&pad_masks),
        mode,
        rng,
        lora,
    )
}
