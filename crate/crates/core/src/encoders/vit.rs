//! Pre-norm transformer trunk shared by every encoder.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Mode, TensorId, TensorResult};

use super::attention::{dropkey_schedule, multi_head_attention, AttentionProbe};
use super::lora::LoraConfig;
use super::params::{Graph, ParamStore};
use super::VitConfig;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Registers all trunk parameters under `prefix`.
pub fn init_transformer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &VitConfig,
    rng: &mut ChaCha8Rng,
) -> TensorResult<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let m = cfg.mlp_dim();
    for l in 0..cfg.depth {
        let p = format!("{prefix}.blocks.{l}");
        store.insert_full(&format!("{p}.ln1.gamma"), vec![d], 1.0)?;
        store.insert_full(&format!("{p}.ln1.beta"), vec![d], 0.0)?;
        for proj in ["wq", "wk", "wv"] {
            store.insert_randn(&format!("{p}.attn.{proj}.w"), vec![d, d], 0.02, rng)?;
            if cfg.qkv_bias {
                store.insert_full(&format!("{p}.attn.{proj}.b"), vec![d], 0.0)?;
            }
        }
        store.insert_randn(&format!("{p}.attn.proj.w"), vec![d, d], 0.02, rng)?;
        store.insert_full(&format!("{p}.attn.proj.b"), vec![d], 0.0)?;
        store.insert_full(&format!("{p}.ln2.gamma"), vec![d], 1.0)?;
        store.insert_full(&format!("{p}.ln2.beta"), vec![d], 0.0)?;
        store.insert_randn(&format!("{p}.mlp.fc1.w"), vec![d, m], 0.02, rng)?;
        store.insert_full(&format!("{p}.mlp.fc1.b"), vec![m], 0.0)?;
        store.insert_randn(&format!("{p}.mlp.fc2.w"), vec![m, d], 0.02, rng)?;
        store.insert_full(&format!("{p}.mlp.fc2.b"), vec![d], 0.0)?;
    }
    store.insert_full(&format!("{prefix}.final_ln.gamma"), vec![d], 1.0)?;
    store.insert_full(&format!("{prefix}.final_ln.beta"), vec![d], 0.0)?;
    Ok(())
}

#[derive(Debug)]
pub struct EncoderOutput {
    /// `[batch, model_dim]` CLS embeddings.
    pub cls: TensorId,
    pub probe: AttentionProbe,
}

fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
) -> TensorResult<TensorId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.tape.layer_norm(x, gamma, beta, NORM_EPS)
}

/// Runs `depth` pre-norm blocks (DropKey attention + GELU MLP, both with
/// residuals) over `[batch*seq, dim]` tokens, applies the final norm, and
/// returns per-sample CLS rows plus the attention probe.
#[allow(clippy::too_many_arguments)]
pub fn transformer_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: TensorId,
    batch: usize,
    seq: usize,
    cfg: &VitConfig,
    key_pad: Option<&[Vec<bool>]>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    lora: Option<&LoraConfig>,
) -> TensorResult<EncoderOutput> {
    cfg.validate()?;
    let mut x = tokens;
    let mut probe = AttentionProbe::default();
    for l in 0..cfg.depth {
        let p = format!("{prefix}.blocks.{l}");
        let rate = dropkey_schedule(l, cfg.depth, cfg.dropkey_rate_first, cfg.dropkey_rate_last);
        let normed = layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let (attn_out, attn_ids) = multi_head_attention(
            g,
            store,
            &format!("{p}.attn"),
            normed,
            batch,
            seq,
            cfg,
            rate,
            key_pad,
            mode,
            rng,
            lora,
        )?;
        probe.layers.push(attn_ids);
        x = g.tape.add(x, attn_out)?;
        let normed = layer_norm(g, store, &format!("{p}.ln2"), x)?;
        let w1 = g.param(store, &format!("{p}.mlp.fc1.w"))?;
        let b1 = g.param(store, &format!("{p}.mlp.fc1.b"))?;
        let h = g.tape.matmul(normed, w1)?;
        let h = g.tape.add_bias(h, b1)?;
        let h = g.tape.gelu(h);
        let w2 = g.param(store, &format!("{p}.mlp.fc2.w"))?;
        let b2 = g.param(store, &format!("{p}.mlp.fc2.b"))?;
        let h = g.tape.matmul(h, w2)?;
        let h = g.tape.add_bias(h, b2)?;
        x = g.tape.add(x, h)?;
    }
    let x = layer_norm(g, store, &format!("{prefix}.final_ln"), x)?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let cls = g.tape.gather_rows(x, &cls_rows)?;
    Ok(EncoderOutput { cls, probe })
}
