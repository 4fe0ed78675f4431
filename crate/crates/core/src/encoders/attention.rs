//! Multi-head scaled-dot-product attention with DropKey masking.
//!
//! DropKey masks key logits *before* the softmax — a Bernoulli draw per
//! (query, key) pair — instead of dropping attention weights after it, and
//! its rate decreases linearly over layers so the last layers keep the most
//! information. No inverse-rate rescaling is applied; surviving keys simply
//! renormalize. Rows are guaranteed at least one live key (full-mask draws
//! are redrawn).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Mode, TensorError, TensorId, TensorResult};

use super::lora::{linear_lora, LoraConfig};
use super::params::{Graph, ParamStore};
use super::VitConfig;

/// Linear per-layer masking rate: `rate_first` at layer 0 down to
/// `rate_last` at the final layer (exact at both endpoints).
pub fn dropkey_schedule(layer_idx: usize, depth: usize, rate_first: f64, rate_last: f64) -> f64 {
    assert!(layer_idx < depth, "layer {layer_idx} out of range {depth}");
    if depth == 1 || layer_idx == 0 {
        return rate_first;
    }
    if layer_idx == depth - 1 {
        return rate_last;
    }
    rate_first + (rate_last - rate_first) * layer_idx as f64 / (depth - 1) as f64
}

/// Attention matrices recorded during a forward pass, one id per
/// (sample, head) in sample-major order, grouped by layer.
#[derive(Debug, Clone, Default)]
pub struct AttentionProbe {
    pub layers: Vec<Vec<TensorId>>,
}

/// One multi-head DropKey attention application over `[batch*seq, dim]`
/// tokens (already normalized by the caller). Returns the projected output
/// and the per-(sample, head) attention ids.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    batch: usize,
    seq: usize,
    cfg: &VitConfig,
    rate: f64,
    key_pad: Option<&[Vec<bool>]>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    lora: Option<&LoraConfig>,
) -> TensorResult<(TensorId, Vec<TensorId>)> {
    if rate >= 1.0 {
        return Err(TensorError::Param(format!(
            "dropkey rate {rate} would mask every key"
        )));
    }
    let dim = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let q = linear_lora(g, store, &format!("{prefix}.wq"), x, cfg.qkv_bias, lora)?;
    let k = linear_lora(g, store, &format!("{prefix}.wk"), x, cfg.qkv_bias, lora)?;
    let v = linear_lora(g, store, &format!("{prefix}.wv"), x, cfg.qkv_bias, lora)?;

    let mut sample_outputs = Vec::with_capacity(batch);
    let mut attn_ids = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let qb = g.tape.slice_rows(q, b * seq, (b + 1) * seq)?;
        let kb = g.tape.slice_rows(k, b * seq, (b + 1) * seq)?;
        let vb = g.tape.slice_rows(v, b * seq, (b + 1) * seq)?;
        let pad = key_pad.map(|p| p[b].as_slice());
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.tape.slice_cols(qb, h * dh, (h + 1) * dh)?;
            let kh = g.tape.slice_cols(kb, h * dh, (h + 1) * dh)?;
            let vh = g.tape.slice_cols(vb, h * dh, (h + 1) * dh)?;
            let (out_h, attn) = dropkey_attention(&mut g.tape, qh, kh, vh, rate, pad, mode, rng)?;
            attn_ids.push(attn);
            head_outputs.push(out_h);
        }
        sample_outputs.push(g.tape.concat(&head_outputs, 1)?);
    }
    let merged = g.tape.concat(&sample_outputs, 0)?;
    let w = g.param(store, &format!("{prefix}.proj.w"))?;
    let projected = g.tape.matmul(merged, w)?;
    let b = g.param(store, &format!("{prefix}.proj.b"))?;
    let out = g.tape.add_bias(projected, b)?;
    debug_assert_eq!(g.tape.value(out).shape(), &[batch * seq, dim]);
    Ok((out, attn_ids))
}

/// Single-head scaled-dot-product attention over `[seq, head_dim]`
/// projections with optional DropKey masking and key padding. Returns the
/// `[seq, head_dim]` output and the `[seq, seq]` attention node.
///
/// In training mode each (query, key) logit is masked to `-inf` with
/// probability `rate` *before* the softmax; eval mode applies no masking
/// and no rescaling, so rate 0 and eval are bitwise the vanilla path.
#[allow(clippy::too_many_arguments)]
pub fn dropkey_attention(
    tape: &mut crate::tensor::Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    rate: f64,
    key_pad: Option<&[bool]>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> TensorResult<(TensorId, TensorId)> {
    if rate >= 1.0 {
        return Err(TensorError::Param(format!(
            "dropkey rate {rate} would mask every key"
        )));
    }
    let n_q = tape.value(q).shape()[0];
    let n_k = tape.value(k).shape()[0];
    let dh = tape.value(q).shape()[1];
    let kt = tape.transpose(k)?;
    let logits_raw = tape.matmul(q, kt)?;
    let logits = tape.scale(logits_raw, 1.0 / (dh as f64).sqrt());
    let masking = mode.is_train() && rate > 0.0;
    let masked = match build_mask(n_q, n_k, key_pad, masking, rate, rng)? {
        Some(mask) => tape.masked_fill(logits, &mask, f64::NEG_INFINITY)?,
        None => logits,
    };
    let attn = tape.softmax(masked, 1)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Combines the padding mask with per-(query, key) DropKey draws. Returns
/// `None` when nothing is masked, so the rate-0 eval path records exactly
/// the vanilla attention graph. Rows whose draw masks every live key are
/// redrawn.
fn build_mask(
    n_q: usize,
    n_k: usize,
    pad: Option<&[bool]>,
    masking: bool,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Option<Vec<bool>>> {
    let any_pad = pad.is_some_and(|p| p.iter().any(|&m| m));
    if !masking && !any_pad {
        return Ok(None);
    }
    if let Some(p) = pad {
        if p.iter().all(|&m| m) {
            return Err(TensorError::Param(
                "attention over fully padded keys".into(),
            ));
        }
    }
    let mut mask = vec![false; n_q * n_k];
    for qi in 0..n_q {
        let row = &mut mask[qi * n_k..(qi + 1) * n_k];
        loop {
            for ki in 0..n_k {
                let padded = pad.is_some_and(|p| p[ki]);
                row[ki] = padded || (masking && rng.gen_bool(rate));
            }
            if row.iter().any(|&m| !m) {
                break;
            }
            // Every live key drawn masked: redraw this query's row.
        }
    }
    Ok(Some(mask))
}
