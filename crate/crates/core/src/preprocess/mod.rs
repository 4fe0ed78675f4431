//! Deterministic, seeded preprocessing for both modalities.
//!
//! ECG records run through resample → NaN cleanup → baseline-wander removal
//! → per-lead min-max; images through contrast-limited adaptive histogram
//! equalization and dataset normalization. Training-time augmentations
//! (scale / jitter / blur for images, time-warp / segment-permute for ECG)
//! are pure functions of (input, config, RNG stream).

mod ecg;
#[cfg(test)]
mod tests;
mod xray;

pub use ecg::{
    ecg_augment, ecg_clean_nan, ecg_minmax_per_lead, ecg_permute_with_order, ecg_preprocess,
    ecg_random_permute, ecg_remove_baseline_wander, ecg_resample, ecg_time_warp,
    ecg_warp_with_factors,
};
pub use xray::{
    xray_adaptive_hist_eq, xray_augment, xray_color_jitter, xray_gaussian_blur, xray_normalize,
    xray_random_resized_scale, XrayAugApplied,
};

use thiserror::Error;

/// Number of ECG leads; the pipeline only handles standard 12-lead records.
pub const ECG_LEADS: usize = 12;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("dimension error: {0}")]
    Dim(String),
}

pub type PreprocessResult<T> = Result<T, PreprocessError>;

/// A 12×L signal matrix (row per lead) with its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    data: Vec<f64>,
    len: usize,
    pub rate_hz: f64,
}

impl EcgRecord {
    pub fn new(data: Vec<f64>, len: usize, rate_hz: f64) -> PreprocessResult<Self> {
        if data.len() != ECG_LEADS * len {
            return Err(PreprocessError::Dim(format!(
                "expected {ECG_LEADS}x{len} = {} samples, got {}",
                ECG_LEADS * len,
                data.len()
            )));
        }
        if rate_hz <= 0.0 {
            return Err(PreprocessError::Param("rate_hz must be positive".into()));
        }
        Ok(EcgRecord { data, len, rate_hz })
    }

    pub fn zeros(len: usize, rate_hz: f64) -> Self {
        EcgRecord {
            data: vec![0.0; ECG_LEADS * len],
            len,
            rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn lead_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn samples(&self) -> &[f64] {
        &self.data
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.data
    }
}

/// Grayscale intensity grid with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl ImageRecord {
    pub const MIN_SIDE: usize = 32;

    pub fn new(pixels: Vec<f64>, height: usize, width: usize) -> PreprocessResult<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(PreprocessError::Dim(format!(
                "image {height}x{width} below minimum side {}",
                Self::MIN_SIDE
            )));
        }
        if pixels.len() != height * width {
            return Err(PreprocessError::Dim(format!(
                "expected {height}x{width} = {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(PreprocessError::Param("non-finite pixel value".into()));
        }
        Ok(ImageRecord {
            pixels,
            height,
            width,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ImageRecord {
            pixels: vec![value; height * width],
            height,
            width,
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Augmentation settings; defaults follow the training recipe
/// (mild scaling most of the time, occasional blur, two ECG deformations).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub scale_prob: f64,
    pub jitter_max: f64,
    pub jitter_prob: f64,
    pub blur_kernel_range: (usize, usize),
    pub blur_prob: f64,
    pub warp_segments: usize,
    pub warp_factor: f64,
    pub permute_segments: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: (0.6, 0.9),
            scale_prob: 0.8,
            jitter_max: 0.4,
            jitter_prob: 0.8,
            blur_kernel_range: (7, 23),
            blur_prob: 0.5,
            warp_segments: 4,
            warp_factor: 0.25,
            permute_segments: 4,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> PreprocessResult<()> {
        for (name, p) in [
            ("scale_prob", self.scale_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PreprocessError::Param(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.scale_range.0 > self.scale_range.1
            || self.blur_kernel_range.0 > self.blur_kernel_range.1
        {
            return Err(PreprocessError::Param("range bounds out of order".into()));
        }
        if self.warp_segments < 1 || self.permute_segments < 1 {
            return Err(PreprocessError::Param("segment counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Endpoint-aligned linear interpolation of `src` to `dst_len` samples.
/// Uses the `a + f*(b-a)` form so constant inputs come through exactly, and
/// integral positions return the original samples bit-for-bit.
pub(crate) fn resample_linear(src: &[f64], dst_len: usize, out: &mut Vec<f64>) {
    out.clear();
    if dst_len == 0 {
        return;
    }
    if src.len() <= 1 || dst_len == 1 {
        out.resize(dst_len, src.first().copied().unwrap_or(0.0));
        return;
    }
    let scale = (src.len() - 1) as f64 / (dst_len - 1) as f64;
    for i in 0..dst_len {
        let p = i as f64 * scale;
        let j = (p.floor() as usize).min(src.len() - 1);
        let f = p - j as f64;
        let a = src[j];
        let b = src[(j + 1).min(src.len() - 1)];
        out.push(a + f * (b - a));
    }
}
