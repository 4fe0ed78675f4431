//! Token builders: 16×16 patch projection for images, a two-stage strided
//! convolution stack (conv → BN → ReLU, twice) for ECG. Both prepend a
//! learned CLS token and add learned positional embeddings.

use rand_chacha::ChaCha8Rng;

use crate::preprocess::{EcgRecord, ECG_LEADS};
use crate::tensor::{Mode, Tensor, TensorError, TensorId, TensorResult};

use super::params::{Graph, ParamStore};
use super::vit::NORM_EPS;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedConfig {
    pub model_dim: usize,
    pub patch_size: usize,
}

impl Default for ImageEmbedConfig {
    fn default() -> Self {
        ImageEmbedConfig {
            model_dim: 128,
            patch_size: 16,
        }
    }
}

impl ImageEmbedConfig {
    /// Patch grid for an H×W input (after padding up to a multiple of the
    /// patch size).
    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.patch_size), w.div_ceil(self.patch_size))
    }

    pub fn tokens(&self, h: usize, w: usize) -> usize {
        let (gh, gw) = self.grid(h, w);
        gh * gw
    }
}

/// Flattens images into `[B*patches, ps*ps]` rows (row-major per patch).
/// Images whose sides are not multiples of the patch size are padded at the
/// bottom/right by edge replication.
pub fn unfold_images(images: &[Tensor], ps: usize) -> TensorResult<(Tensor, usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| TensorError::Param("empty image batch".into()))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let (gh, gw) = (h.div_ceil(ps), w.div_ceil(ps));
    let mut data = Vec::with_capacity(images.len() * gh * gw * ps * ps);
    for img in images {
        if img.shape() != [h, w] {
            return Err(TensorError::Dim("ragged image batch".into()));
        }
        let px = img.data();
        for py in 0..gh {
            for pxi in 0..gw {
                for dy in 0..ps {
                    let sy = (py * ps + dy).min(h - 1);
                    for dx in 0..ps {
                        let sx = (pxi * ps + dx).min(w - 1);
                        data.push(px[sy * w + sx]);
                    }
                }
            }
        }
    }
    let rows = images.len() * gh * gw;
    Ok((Tensor::new(vec![rows, ps * ps], data)?, gh, gw))
}

/// Registers projection, CLS and positional parameters for an image grid of
/// `n_patches` tokens.
pub fn init_image_patch(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ImageEmbedConfig,
    n_patches: usize,
    rng: &mut ChaCha8Rng,
) -> TensorResult<()> {
    let d = cfg.model_dim;
    store.insert_randn(
        &format!("{prefix}.patch.proj.w"),
        vec![cfg.patch_size * cfg.patch_size, d],
        0.02,
        rng,
    )?;
    store.insert_full(&format!("{prefix}.patch.proj.b"), vec![d], 0.0)?;
    store.insert_randn(&format!("{prefix}.cls"), vec![1, d], 0.02, rng)?;
    store.insert_randn(&format!("{prefix}.pos"), vec![n_patches + 1, d], 0.02, rng)?;
    Ok(())
}

fn prepend_cls_and_pos(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    patches: TensorId,
    batch: usize,
    per_sample: usize,
) -> TensorResult<(TensorId, usize)> {
    let cls = g.param(store, &format!("{prefix}.cls"))?;
    let mut pieces = Vec::with_capacity(batch * 2);
    for b in 0..batch {
        pieces.push(cls);
        pieces.push(
            g.tape
                .slice_rows(patches, b * per_sample, (b + 1) * per_sample)?,
        );
    }
    let with_cls = g.tape.concat(&pieces, 0)?;
    let pos = g.param(store, &format!("{prefix}.pos"))?;
    let tokens = g.tape.add_tiled(with_cls, pos, batch)?;
    Ok((tokens, per_sample + 1))
}

/// `[B, H, W] -> [B*(patches+1), dim]` token rows (CLS first per sample).
pub fn image_patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    images: &[Tensor],
    cfg: &ImageEmbedConfig,
) -> TensorResult<(TensorId, usize)> {
    let (unfolded, gh, gw) = unfold_images(images, cfg.patch_size)?;
    let x = g.tape.constant(unfolded);
    let w = g.param(store, &format!("{prefix}.patch.proj.w"))?;
    let b = g.param(store, &format!("{prefix}.patch.proj.b"))?;
    let proj = g.tape.matmul(x, w)?;
    let proj = g.tape.add_bias(proj, b)?;
    prepend_cls_and_pos(g, store, prefix, proj, images.len(), gh * gw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgEmbedConfig {
    pub model_dim: usize,
    pub mid_channels: usize,
    pub kernel1: usize,
    pub stride1: usize,
    pub kernel2: usize,
    pub stride2: usize,
}

impl Default for EcgEmbedConfig {
    fn default() -> Self {
        EcgEmbedConfig {
            model_dim: 128,
            mid_channels: 64,
            kernel1: 15,
            stride1: 5,
            kernel2: 7,
            stride2: 4,
        }
    }
}

impl EcgEmbedConfig {
    /// Convolution tokens for an input of `len` samples (CLS excluded).
    pub fn conv_tokens(&self, len: usize) -> TensorResult<usize> {
        if len < self.kernel1 {
            return Err(TensorError::Dim(format!(
                "ECG length {len} below first kernel {}",
                self.kernel1
            )));
        }
        let l1 = (len - self.kernel1) / self.stride1 + 1;
        if l1 < self.kernel2 {
            return Err(TensorError::Dim(format!(
                "intermediate length {l1} below second kernel {}",
                self.kernel2
            )));
        }
        Ok((l1 - self.kernel2) / self.stride2 + 1)
    }

    /// Receptive field of conv token `t` in input samples: (start, length).
    pub fn receptive_field(&self, t: usize) -> (usize, usize) {
        let start = t * self.stride2 * self.stride1;
        let len = (self.kernel2 - 1) * self.stride1 + self.kernel1;
        (start, len)
    }
}

/// Registers both conv/BN stages plus CLS and positional parameters for
/// records of `len` samples.
pub fn init_ecg_patch(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EcgEmbedConfig,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> TensorResult<usize> {
    let tokens = cfg.conv_tokens(len)?;
    let (c1, d) = (cfg.mid_channels, cfg.model_dim);
    let fan1 = ECG_LEADS * cfg.kernel1;
    store.insert_randn(
        &format!("{prefix}.patch.conv1.w"),
        vec![c1, ECG_LEADS, cfg.kernel1],
        (2.0 / fan1 as f64).sqrt(),
        rng,
    )?;
    store.insert_full(&format!("{prefix}.patch.conv1.b"), vec![c1], 0.0)?;
    init_bn(store, &format!("{prefix}.patch.bn1"), c1)?;
    let fan2 = c1 * cfg.kernel2;
    store.insert_randn(
        &format!("{prefix}.patch.conv2.w"),
        vec![d, c1, cfg.kernel2],
        (2.0 / fan2 as f64).sqrt(),
        rng,
    )?;
    store.insert_full(&format!("{prefix}.patch.conv2.b"), vec![d], 0.0)?;
    init_bn(store, &format!("{prefix}.patch.bn2"), d)?;
    store.insert_randn(&format!("{prefix}.cls"), vec![1, d], 0.02, rng)?;
    store.insert_randn(&format!("{prefix}.pos"), vec![tokens + 1, d], 0.02, rng)?;
    Ok(tokens)
}

fn init_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> TensorResult<()> {
    store.insert_full(&format!("{prefix}.gamma"), vec![channels], 1.0)?;
    store.insert_full(&format!("{prefix}.beta"), vec![channels], 0.0)?;
    store.insert_state(&format!("{prefix}.running_mean"), vec![channels], 0.0)?;
    store.insert_state(&format!("{prefix}.running_var"), vec![channels], 1.0)?;
    Ok(())
}

/// Batch norm that reads running statistics in eval mode and records batch
/// statistics for the trainer to fold into them in train mode.
pub(crate) fn batch_norm_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    mode: Mode,
) -> TensorResult<TensorId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let rm_idx = store
        .index_of(&rm_name)
        .ok_or_else(|| TensorError::Param(format!("missing {rm_name}")))?;
    let rv_idx = store
        .index_of(&rv_name)
        .ok_or_else(|| TensorError::Param(format!("missing {rv_name}")))?;
    match mode {
        Mode::Train => {
            let (y, mean, var) = g.tape.batch_norm_train(x, gamma, beta, NORM_EPS)?;
            g.bn_updates.push((rm_idx, rv_idx, mean, var));
            Ok(y)
        }
        Mode::Eval => {
            let rm = store.entry(rm_idx).tensor.data().to_vec();
            let rv = store.entry(rv_idx).tensor.data().to_vec();
            g.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, NORM_EPS)
        }
    }
}

/// `[B × EcgRecord(12×L)] -> [B*(tokens+1), dim]` token rows.
pub fn ecg_patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    ecgs: &[EcgRecord],
    cfg: &EcgEmbedConfig,
    mode: Mode,
) -> TensorResult<(TensorId, usize)> {
    let first = ecgs
        .first()
        .ok_or_else(|| TensorError::Param("empty ECG batch".into()))?;
    let len = first.len();
    let tokens = cfg.conv_tokens(len)?;
    let mut data = Vec::with_capacity(ecgs.len() * ECG_LEADS * len);
    for rec in ecgs {
        if rec.len() != len {
            return Err(TensorError::Dim("ragged ECG batch".into()));
        }
        data.extend_from_slice(rec.samples());
    }
    let x = g
        .tape
        .constant(Tensor::new(vec![ecgs.len(), ECG_LEADS, len], data)?);
    let w1 = g.param(store, &format!("{prefix}.patch.conv1.w"))?;
    let b1 = g.param(store, &format!("{prefix}.patch.conv1.b"))?;
    let h = g.tape.conv1d(x, w1, Some(b1), cfg.stride1)?;
    let h = batch_norm_layer(g, store, &format!("{prefix}.patch.bn1"), h, mode)?;
    let h = g.tape.relu(h);
    let w2 = g.param(store, &format!("{prefix}.patch.conv2.w"))?;
    let b2 = g.param(store, &format!("{prefix}.patch.conv2.b"))?;
    let h = g.tape.conv1d(h, w2, Some(b2), cfg.stride2)?;
    let h = batch_norm_layer(g, store, &format!("{prefix}.patch.bn2"), h, mode)?;
    let h = g.tape.relu(h);
    let rows = g.tape.channels_last(h)?; // [B*tokens, dim]
    debug_assert_eq!(g.tape.value(rows).shape(), &[ecgs.len() * tokens, cfg.model_dim]);
    prepend_cls_and_pos(g, store, prefix, rows, ecgs.len(), tokens)
}
