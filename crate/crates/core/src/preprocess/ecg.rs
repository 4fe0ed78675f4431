//! ECG pipeline: resample → NaN cleanup → baseline-wander removal →
//! per-lead min-max, plus the two training deformations (time warp,
//! segment permutation).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{resample_linear, EcgRecord, PreprocessError, PreprocessResult, ECG_LEADS};

/// Resamples to `target_hz` by linear interpolation at the new sample
/// instants (`p = i * src_rate / target_hz`). Constant leads are preserved
/// exactly; a 500→100 Hz conversion hits original samples bit-for-bit.
pub fn ecg_resample(x: &EcgRecord, target_hz: f64) -> PreprocessResult<EcgRecord> {
    if target_hz <= 0.0 {
        return Err(PreprocessError::Param(format!(
            "target_hz = {target_hz} must be positive"
        )));
    }
    let src_len = x.len();
    let dst_len = ((src_len as f64) * target_hz / x.rate_hz).round() as usize;
    if dst_len == 0 {
        return Err(PreprocessError::Param(
            "resample would produce an empty record".into(),
        ));
    }
    let step = x.rate_hz / target_hz;
    let mut out = EcgRecord::zeros(dst_len, target_hz);
    for li in 0..ECG_LEADS {
        let src = x.lead(li);
        let dst = out.lead_mut(li);
        for (i, d) in dst.iter_mut().enumerate() {
            let p = i as f64 * step;
            let j = (p.floor() as usize).min(src_len - 1);
            let f = p - j as f64;
            let a = src[j];
            let b = src[(j + 1).min(src_len - 1)];
            *d = a + f * (b - a);
        }
    }
    Ok(out)
}

/// Swaps every non-finite sample (NaN, ±inf) with 0.
pub fn ecg_clean_nan(x: &EcgRecord) -> EcgRecord {
    let mut out = x.clone();
    for v in out.samples_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    out
}

/// Removes low-frequency drift by subtracting a per-lead moving median
/// (window `window_seconds`, forced odd; edges use the truncated window).
pub fn ecg_remove_baseline_wander(
    x: &EcgRecord,
    window_seconds: f64,
) -> PreprocessResult<EcgRecord> {
    let mut w = (window_seconds * x.rate_hz).round() as usize;
    if w % 2 == 0 {
        w += 1;
    }
    if w < 3 {
        return Err(PreprocessError::Param(format!(
            "baseline window of {w} samples is too small (need >= 3)"
        )));
    }
    let len = x.len();
    let half = w / 2;
    let mut out = x.clone();
    let mut window: Vec<f64> = Vec::with_capacity(w);
    for li in 0..ECG_LEADS {
        let src = x.lead(li);
        window.clear();
        let mut lo = 0usize;
        let mut hi = 0usize;
        let dst = out.lead_mut(li);
        for c in 0..len {
            let new_lo = c.saturating_sub(half);
            let new_hi = (c + half + 1).min(len);
            while hi < new_hi {
                let v = src[hi];
                let pos = window.partition_point(|&q| q < v);
                window.insert(pos, v);
                hi += 1;
            }
            while lo < new_lo {
                let v = src[lo];
                let pos = window.partition_point(|&q| q < v);
                window.remove(pos);
                lo += 1;
            }
            let n = window.len();
            let median = if n % 2 == 1 {
                window[n / 2]
            } else {
                0.5 * (window[n / 2 - 1] + window[n / 2])
            };
            dst[c] = src[c] - median;
        }
    }
    Ok(out)
}

/// Affinely maps each lead so min → −1 and max → +1; a zero-range lead
/// becomes all zeros.
pub fn ecg_minmax_per_lead(x: &EcgRecord) -> EcgRecord {
    let mut out = x.clone();
    for li in 0..ECG_LEADS {
        let lead = out.lead_mut(li);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in lead.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range == 0.0 {
            lead.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for v in lead.iter_mut() {
                *v = 2.0 * (*v - lo) / range - 1.0;
            }
        }
    }
    out
}

fn segment_bounds(len: usize, segments: usize) -> PreprocessResult<Vec<(usize, usize)>> {
    if segments < 1 {
        return Err(PreprocessError::Param("segments must be >= 1".into()));
    }
    if len < segments {
        return Err(PreprocessError::Param(format!(
            "cannot split {len} samples into {segments} segments"
        )));
    }
    let base = len / segments;
    Ok((0..segments)
        .map(|s| {
            let start = s * base;
            let end = if s + 1 == segments { len } else { (s + 1) * base };
            (start, end)
        })
        .collect())
}

/// Deterministic warp core: stretches segment `s` by `factors[s]` via linear
/// interpolation, then resamples the concatenation back to the original
/// length. The same factors apply to all 12 leads so the time axis stays
/// consistent across the record.
pub fn ecg_warp_with_factors(
    x: &EcgRecord,
    segments: usize,
    factors: &[f64],
) -> PreprocessResult<EcgRecord> {
    let len = x.len();
    let bounds = segment_bounds(len, segments)?;
    if factors.len() != segments {
        return Err(PreprocessError::Param("one factor per segment".into()));
    }
    let mut out = x.clone();
    let mut warped: Vec<f64> = Vec::with_capacity(len * 2);
    let mut piece: Vec<f64> = Vec::new();
    for li in 0..ECG_LEADS {
        let src = x.lead(li);
        warped.clear();
        for (s, &(start, end)) in bounds.iter().enumerate() {
            let seg = &src[start..end];
            let new_len = ((seg.len() as f64) * factors[s]).round().max(1.0) as usize;
            resample_linear(seg, new_len, &mut piece);
            warped.extend_from_slice(&piece);
        }
        resample_linear(&warped, len, &mut piece);
        out.lead_mut(li).copy_from_slice(&piece);
    }
    Ok(out)
}

/// Splits each lead into `segments` contiguous chunks and independently
/// stretches or compresses every chunk by `1 ± factor` (coin flip per chunk).
pub fn ecg_time_warp(
    x: &EcgRecord,
    segments: usize,
    factor: f64,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<EcgRecord> {
    if segments < 1 {
        return Err(PreprocessError::Param("segments must be >= 1".into()));
    }
    let factors: Vec<f64> = (0..segments)
        .map(|_| {
            if rng.gen_bool(0.5) {
                1.0 + factor
            } else {
                1.0 - factor
            }
        })
        .collect();
    ecg_warp_with_factors(x, segments, &factors)
}

/// Deterministic permutation core: chunk `order[i]` of the input becomes
/// chunk `i` of the output, identically for all 12 leads.
pub fn ecg_permute_with_order(
    x: &EcgRecord,
    segments: usize,
    order: &[usize],
) -> PreprocessResult<EcgRecord> {
    let len = x.len();
    let bounds = segment_bounds(len, segments)?;
    let mut seen = vec![false; segments];
    for &s in order {
        if s >= segments || seen[s] {
            return Err(PreprocessError::Param("order is not a permutation".into()));
        }
        seen[s] = true;
    }
    if order.len() != segments {
        return Err(PreprocessError::Param("order is not a permutation".into()));
    }
    let mut out = x.clone();
    for li in 0..ECG_LEADS {
        let src = x.lead(li);
        let dst = out.lead_mut(li);
        let mut cursor = 0;
        for &s in order {
            let (start, end) = bounds[s];
            dst[cursor..cursor + (end - start)].copy_from_slice(&src[start..end]);
            cursor += end - start;
        }
    }
    Ok(out)
}

/// Reorders `segments` contiguous chunks by one uniformly drawn permutation.
pub fn ecg_random_permute(
    x: &EcgRecord,
    segments: usize,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<EcgRecord> {
    if segments < 1 {
        return Err(PreprocessError::Param("segments must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..segments).collect();
    order.shuffle(rng);
    ecg_permute_with_order(x, segments, &order)
}

/// The full static pipeline: resample to `target_hz`, zero non-finite
/// samples, remove baseline wander (0.6 s median window), min-max each lead
/// to [−1, 1].
pub fn ecg_preprocess(x: &EcgRecord, target_hz: f64) -> PreprocessResult<EcgRecord> {
    let resampled = ecg_resample(x, target_hz)?;
    let cleaned = ecg_clean_nan(&resampled);
    let detrended = ecg_remove_baseline_wander(&cleaned, 0.6)?;
    Ok(ecg_minmax_per_lead(&detrended))
}

/// Training-time ECG deformations: time warp then segment permutation.
pub fn ecg_augment(
    x: &EcgRecord,
    cfg: &super::AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<EcgRecord> {
    let warped = ecg_time_warp(x, cfg.warp_segments, cfg.warp_factor, rng)?;
    ecg_random_permute(&warped, cfg.permute_segments, rng)
}
