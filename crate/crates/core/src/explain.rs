//! Gradient-weighted attention-rollout explanations.
//!
//! After backpropagating a class score, each layer contributes
//! `C_l = mean over heads of max(grad(A_l) ⊙ A_l, 0)`; relevance accumulates
//! as `R ← rownorm((I + C_l) · R)` from the input layer outward, and the CLS
//! row of the final `R` (its self-term removed) scores every input token.
//! Patch scores render onto the pixel grid; ECG token scores spread over
//! their convolutional receptive fields.

use thiserror::Error;

use rand_chacha::ChaCha8Rng;

use crate::encoders::{AttentionProbe, EcgEmbedConfig, Graph};
use crate::model::{MoreModel, IMG};
use crate::pipeline::PreparedSample;
use crate::preprocess::xray_normalize;
use crate::rng::stream;
use crate::tensor::{Mode, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ExplainResult<T> = Result<T, ExplainError>;

/// Attention matrices and their gradients for one sample, per layer per head.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// `layers[l].heads[h]` = (A, dA), both `[T, T]` row-stochastic /
    /// gradient pairs.
    pub layers: Vec<LayerAttention>,
}

#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub heads: Vec<(Tensor, Tensor)>,
}

/// Pulls (A, dA) pairs off a tape for a single-sample forward. Fails if the
/// backward pass has not populated attention gradients.
pub fn extract_trace(tape: &Tape, probe: &AttentionProbe) -> ExplainResult<AttentionTrace> {
    let mut layers = Vec::with_capacity(probe.layers.len());
    for (l, head_ids) in probe.layers.iter().enumerate() {
        let mut heads = Vec::with_capacity(head_ids.len());
        for (h, &id) in head_ids.iter().enumerate() {
            let a = tape.value(id).clone();
            let grad = tape.grad_tensor(id).ok_or_else(|| {
                ExplainError::Invalid(format!(
                    "attention gradient missing at layer {l} head {h}; run backward first"
                ))
            })?;
            heads.push((a, grad));
        }
        layers.push(LayerAttention { heads });
    }
    Ok(AttentionTrace { layers })
}

/// Per-token relevance, CLS at index 0 (always zeroed in the output).
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub token_scores: Vec<f64>,
}

/// The rollout described in the module docs. All scores are non-negative.
pub fn relevance_rollout(trace: &AttentionTrace) -> ExplainResult<RelevanceMap> {
    let first = trace
        .layers
        .first()
        .and_then(|l| l.heads.first())
        .ok_or_else(|| ExplainError::Invalid("empty attention trace".into()))?;
    let t = first.0.shape()[0];
    let mut r: Vec<f64> = Tensor::eye(t).into_data();
    let mut m = vec![0.0; t * t];
    let mut next = vec![0.0; t * t];
    for layer in &trace.layers {
        if layer.heads.is_empty() {
            return Err(ExplainError::Invalid("layer without heads".into()));
        }
        // M = I + mean over heads of relu(dA ⊙ A)
        m.iter_mut().for_each(|v| *v = 0.0);
        for (a, da) in &layer.heads {
            if a.shape() != [t, t] || da.shape() != [t, t] {
                return Err(ExplainError::Invalid(format!(
                    "attention shape {:?} inconsistent with {t} tokens",
                    a.shape()
                )));
            }
            for (mv, (&av, &dv)) in m.iter_mut().zip(a.data().iter().zip(da.data())) {
                *mv += (dv * av).max(0.0);
            }
        }
        let hn = layer.heads.len() as f64;
        m.iter_mut().for_each(|v| *v /= hn);
        for i in 0..t {
            m[i * t + i] += 1.0;
        }
        // R <- rownorm(M · R)
        next.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..t {
            for k in 0..t {
                let mv = m[i * t + k];
                if mv == 0.0 {
                    continue;
                }
                for j in 0..t {
                    next[i * t + j] += mv * r[k * t + j];
                }
            }
        }
        for i in 0..t {
            let sum: f64 = next[i * t..(i + 1) * t].iter().sum();
            if sum > 0.0 {
                for v in &mut next[i * t..(i + 1) * t] {
                    *v /= sum;
                }
            }
        }
        std::mem::swap(&mut r, &mut next);
    }
    let mut token_scores: Vec<f64> = r[0..t].to_vec();
    token_scores[0] = 0.0; // CLS self-term excluded
    token_scores.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(RelevanceMap { token_scores })
}

fn minmax_normalize(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        // Degenerate flat map: renders as uniform full intensity.
        values.iter_mut().for_each(|v| *v = 1.0);
    }
}

/// Min-max normalizes patch relevances and bilinearly upsamples the
/// `gh × gw` grid onto `h × w` pixels (grid corners pinned to image
/// corners). Patch token order is row-major, CLS excluded.
pub fn render_image_heatmap(
    map: &RelevanceMap,
    grid: (usize, usize),
    size: (usize, usize),
) -> ExplainResult<Vec<f64>> {
    let (gh, gw) = grid;
    let (h, w) = size;
    if map.token_scores.len() != gh * gw + 1 {
        return Err(ExplainError::Invalid(format!(
            "{} token scores do not fit a {gh}x{gw} grid (+CLS)",
            map.token_scores.len()
        )));
    }
    let mut patch: Vec<f64> = map.token_scores[1..].to_vec();
    minmax_normalize(&mut patch);
    let mut out = vec![0.0; h * w];
    let sy = if h > 1 && gh > 1 {
        (gh - 1) as f64 / (h - 1) as f64
    } else {
        0.0
    };
    let sx = if w > 1 && gw > 1 {
        (gw - 1) as f64 / (w - 1) as f64
    } else {
        0.0
    };
    for y in 0..h {
        let py = y as f64 * sy;
        let y0 = (py.floor() as usize).min(gh - 1);
        let y1 = (y0 + 1).min(gh - 1);
        let fy = py - y0 as f64;
        for x in 0..w {
            let px = x as f64 * sx;
            let x0 = (px.floor() as usize).min(gw - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let fx = px - x0 as f64;
            let a = patch[y0 * gw + x0];
            let b = patch[y0 * gw + x1];
            let c = patch[y1 * gw + x0];
            let d = patch[y1 * gw + x1];
            let top = a + fx * (b - a);
            let bot = c + fx * (d - c);
            out[y * w + x] = top + fy * (bot - top);
        }
    }
    Ok(out)
}

/// Spreads each ECG token's relevance uniformly over its convolutional
/// receptive field, sums overlaps and min-max normalizes. Samples past the
/// last token's field stay zero (documented edge taper).
pub fn render_ecg_relevance(
    map: &RelevanceMap,
    cfg: &EcgEmbedConfig,
    out_len: usize,
) -> ExplainResult<Vec<f64>> {
    let tokens = map.token_scores.len() - 1;
    let mut out = vec![0.0; out_len];
    for t in 0..tokens {
        let (start, len) = cfg.receptive_field(t);
        if start >= out_len {
            return Err(ExplainError::Invalid(format!(
                "token {t} maps past the signal (start {start} >= {out_len})"
            )));
        }
        let score = map.token_scores[t + 1] / len as f64;
        for v in out.iter_mut().skip(start).take(len) {
            *v += score;
        }
    }
    minmax_normalize(&mut out);
    Ok(out)
}

/// Which modality a relevance request targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainModality {
    Xray,
    Ecg,
}

pub struct Explanation {
    pub map: RelevanceMap,
    /// Zero-shot alignment score whose gradient drove the rollout.
    pub score: f64,
}

/// End-to-end explanation of one sample: the class prompt is embedded by the
/// text branch, the cosine between it and the sample's embedding is
/// backpropagated, and the chosen modality's attention rollout is returned.
pub fn explain_sample(
    model: &MoreModel,
    sample: &PreparedSample,
    stats: (f64, f64),
    class_prompt: &str,
    modality: ExplainModality,
) -> ExplainResult<Explanation> {
    let mut g = Graph::new(&model.store);
    let mut rng: ChaCha8Rng = stream(0, "explain", &[]);
    let (probe, z_item) = match modality {
        ExplainModality::Xray => {
            let img = xray_normalize(&sample.image, stats.0, stats.1)
                .map_err(|e| ExplainError::Invalid(e.to_string()))?;
            let out = model.encode_images(&mut g, &[img], Mode::Eval, &mut rng)?;
            let z = model.project_cls(&mut g, IMG, out.cls, Mode::Eval)?;
            (out.probe, z)
        }
        ExplainModality::Ecg => {
            let out = model.encode_ecgs(&mut g, &[sample.ecg.clone()], Mode::Eval, &mut rng)?;
            let z = model.project_cls(&mut g, crate::model::ECG, out.cls, Mode::Eval)?;
            (out.probe, z)
        }
    };
    let prompt_ids = crate::data::join_reports(class_prompt, class_prompt, &model.tokenizer);
    let text = model.encode_texts(&mut g, &[prompt_ids], Mode::Eval, &mut rng)?;
    let z_prompt = model.project_cls(&mut g, crate::model::TEXT, text.cls, Mode::Eval)?;
    let zt = g.tape.transpose(z_prompt)?;
    let score_id = g.tape.matmul(z_item, zt)?;
    let score = g.tape.scalar_value(score_id);
    g.tape.backward(score_id)?;
    let trace = extract_trace(&g.tape, &probe)?;
    let map = relevance_rollout(&trace)?;
    Ok(Explanation { map, score })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn row_stochastic(t: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            let row = &mut data[i * t..(i + 1) * t];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        tensor(vec![t, t], data)
    }

    #[test]
    fn identity_attention_uniform_gradient_gives_uniform_relevance() {
        let t = 4;
        let a = Tensor::eye(t);
        let da = Tensor::full(vec![t, t], 0.7);
        let trace = AttentionTrace {
            layers: vec![LayerAttention {
                heads: vec![(a, da)],
            }],
        };
        let map = relevance_rollout(&trace).unwrap();
        // (I + 0.7I) row-normalizes back to I: CLS row is one-hot on itself,
        // which the self-term removal zeroes — uniform over tokens.
        assert_eq!(map.token_scores[0], 0.0);
        for &s in &map.token_scores[1..] {
            assert_eq!(s, map.token_scores[1]);
        }
    }

    #[test]
    fn zero_gradients_give_uniform_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = row_stochastic(5, &mut rng);
        let da = Tensor::zeros(vec![5, 5]);
        let trace = AttentionTrace {
            layers: vec![LayerAttention {
                heads: vec![(a, da)],
            }],
        };
        let map = relevance_rollout(&trace).unwrap();
        for &s in &map.token_scores[1..] {
            assert_eq!(s, map.token_scores[1]);
        }
    }

    #[test]
    fn two_layer_trace_matches_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 3;
        let layers: Vec<(Tensor, Tensor)> = (0..2)
            .map(|_| {
                let a = row_stochastic(t, &mut rng);
                let mut da = vec![0.0; t * t];
                da.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                (a, tensor(vec![t, t], da))
            })
            .collect();
        let trace = AttentionTrace {
            layers: layers
                .iter()
                .map(|(a, da)| LayerAttention {
                    heads: vec![(a.clone(), da.clone())],
                })
                .collect(),
        };
        let got = relevance_rollout(&trace).unwrap();

        // Hand expansion with explicit matrix products.
        let cmat = |a: &Tensor, da: &Tensor| -> Vec<f64> {
            let mut c = vec![0.0; t * t];
            for i in 0..t * t {
                c[i] = (a.data()[i] * da.data()[i]).max(0.0);
            }
            for i in 0..t {
                c[i * t + i] += 1.0;
            }
            c
        };
        let matmul = |x: &[f64], y: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; t * t];
            for i in 0..t {
                for k in 0..t {
                    for j in 0..t {
                        out[i * t + j] += x[i * t + k] * y[k * t + j];
                    }
                }
            }
            out
        };
        let rownorm = |x: &mut [f64]| {
            for i in 0..t {
                let s: f64 = x[i * t..(i + 1) * t].iter().sum();
                for v in &mut x[i * t..(i + 1) * t] {
                    *v /= s;
                }
            }
        };
        let mut r: Vec<f64> = Tensor::eye(t).into_data();
        for (a, da) in &layers {
            let m = cmat(a, da);
            r = matmul(&m, &r);
            rownorm(&mut r);
        }
        let mut want: Vec<f64> = r[0..t].to_vec();
        want[0] = 0.0;
        for (g, w) in got.token_scores.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn doubling_gradients_preserves_argmax_per_layer() {
        // Exact form of the positive-homogeneity property: within one layer,
        // relu(2g ⊙ A) = 2·relu(g ⊙ A), so the single-layer rollout keeps its
        // argmax under any positive gradient rescaling. (Across multiple
        // layers the identity term in I + C_l does not rescale, so only the
        // per-layer statement is exact.)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = 6;
            let mk = |scale: f64, rng: &mut ChaCha8Rng| -> AttentionTrace {
                AttentionTrace {
                    layers: vec![LayerAttention {
                        heads: (0..2)
                            .map(|_| {
                                let a = row_stochastic(t, rng);
                                let da: Vec<f64> =
                                    (0..t * t).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
                                (a, tensor(vec![t, t], da))
                            })
                            .collect(),
                    }],
                }
            };
            let seed: u64 = rng.gen();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let base = relevance_rollout(&mk(1.0, &mut r1)).unwrap();
            let doubled = relevance_rollout(&mk(2.0, &mut r2)).unwrap();
            let argmax = |m: &RelevanceMap| {
                m.token_scores
                    .iter()
                    .enumerate()
                    .skip(1)
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&base), argmax(&doubled));
        }
    }

    #[test]
    fn layer_contribution_is_positively_homogeneous_in_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 5;
        let a = row_stochastic(t, &mut rng);
        let da: Vec<f64> = (0..t * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..t * t {
            let c1 = (a.data()[i] * da[i]).max(0.0);
            let c2 = (a.data()[i] * (2.0 * da[i])).max(0.0);
            assert_eq!(c2, 2.0 * c1);
        }
    }

    #[test]
    fn relevance_is_nonnegative_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let t = rng.gen_range(2..8);
            let layers = rng.gen_range(1..4);
            let heads = rng.gen_range(1..4);
            let trace = AttentionTrace {
                layers: (0..layers)
                    .map(|_| LayerAttention {
                        heads: (0..heads)
                            .map(|_| {
                                let a = row_stochastic(t, &mut rng);
                                let da: Vec<f64> =
                                    (0..t * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
                                (a, tensor(vec![t, t], da))
                            })
                            .collect(),
                    })
                    .collect(),
            };
            let map = relevance_rollout(&trace).unwrap();
            assert!(map.token_scores.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rollout_requires_gradients() {
        use crate::encoders::{dropkey_attention, AttentionProbe};
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::full(vec![2, 2], 0.3).with_grad());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, attn) =
            dropkey_attention(&mut tape, q, q, q, 0.0, None, Mode::Eval, &mut rng).unwrap();
        let probe = AttentionProbe {
            layers: vec![vec![attn]],
        };
        // No backward pass ran: extraction must fail.
        assert!(extract_trace(&tape, &probe).is_err());
    }

    #[test]
    fn heatmap_degenerate_uniform_and_hot_patch() {
        // Uniform relevance (all equal) renders as all-ones.
        let map = RelevanceMap {
            token_scores: vec![0.0, 0.5, 0.5, 0.5, 0.5],
        };
        let hm = render_image_heatmap(&map, (2, 2), (8, 8)).unwrap();
        assert!(hm.iter().all(|&v| v == 1.0));

        // A single hot patch dominates its own pixel region.
        let map = RelevanceMap {
            token_scores: vec![0.0, 1.0, 0.1, 0.1, 0.1],
        };
        let hm = render_image_heatmap(&map, (2, 2), (16, 16)).unwrap();
        let max = hm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(hm[0], max, "hot patch corner carries the maximum");
    }

    #[test]
    fn heatmap_bilinear_matches_hand_weights() {
        // 2x2 grid onto 3x3 pixels: the center is the mean of all four
        // corners; edge midpoints average their two neighbours.
        let map = RelevanceMap {
            token_scores: vec![0.0, 1.0, 0.0, 0.0, 1.0],
        };
        let hm = render_image_heatmap(&map, (2, 2), (3, 3)).unwrap();
        assert_eq!(hm[0], 1.0);
        assert_eq!(hm[2], 0.0);
        assert_eq!(hm[6], 0.0);
        assert_eq!(hm[8], 1.0);
        assert!((hm[1] - 0.5).abs() < 1e-12);
        assert!((hm[3] - 0.5).abs() < 1e-12);
        assert!((hm[4] - 0.5).abs() < 1e-12);
        assert!((hm[5] - 0.5).abs() < 1e-12);
        assert!((hm[7] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ecg_receptive_fields_match_conv_arithmetic() {
        let cfg = EcgEmbedConfig::default();
        // Independent derivation: token t of the second conv reads first-conv
        // outputs [s2*t, s2*t + k2 - 1]; first-conv output j reads inputs
        // [s1*j, s1*j + k1 - 1].
        for t in 0..cfg.conv_tokens(1000).unwrap() {
            let first_lo = cfg.stride2 * t;
            let first_hi = cfg.stride2 * t + cfg.kernel2 - 1;
            let in_lo = cfg.stride1 * first_lo;
            let in_hi = cfg.stride1 * first_hi + cfg.kernel1 - 1;
            let (start, len) = cfg.receptive_field(t);
            assert_eq!(start, in_lo);
            assert_eq!(start + len - 1, in_hi);
        }
    }

    #[test]
    fn ecg_relevance_hot_token_and_uniform_taper() {
        let cfg = EcgEmbedConfig::default();
        let tokens = cfg.conv_tokens(1000).unwrap();
        // One hot token: support exactly its receptive field.
        let mut scores = vec![0.0; tokens + 1];
        scores[1 + 10] = 1.0;
        let map = RelevanceMap {
            token_scores: scores,
        };
        let rel = render_ecg_relevance(&map, &cfg, 1000).unwrap();
        let (start, len) = cfg.receptive_field(10);
        for (i, &v) in rel.iter().enumerate() {
            if i >= start && i < start + len {
                assert!(v > 0.0, "sample {i} inside the field must be > 0");
            } else {
                assert_eq!(v, 0.0, "sample {i} outside the field must be 0");
            }
        }

        // Uniform tokens: interior coverage varies between 2 and 3 fields,
        // and the uncovered tail past the last field stays at zero.
        let map = RelevanceMap {
            token_scores: vec![1.0; tokens + 1],
        };
        let rel = render_ecg_relevance(&map, &cfg, 1000).unwrap();
        let (last_start, last_len) = cfg.receptive_field(tokens - 1);
        for &v in &rel[100..last_start] {
            assert!(v >= 2.0 / 3.0 - 1e-9, "interior value {v} below 2/3 of max");
        }
        for &v in &rel[last_start + last_len..] {
            assert_eq!(v, 0.0);
        }
    }
}
