//! X-ray image preprocessing: CLAHE, dataset normalization and the three
//! probabilistic augmentations (resized scaling, brightness/contrast jitter,
//! Gaussian blur).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{AugmentConfig, ImageRecord, PreprocessError, PreprocessResult};

const HIST_BINS: usize = 256;

/// Contrast-limited adaptive histogram equalization over a `tiles` grid.
///
/// Per-tile 256-bin histograms are clipped at `clip`× the mean bin height
/// (excess redistributed), turned into cumulative LUTs, and blended
/// bilinearly between neighbouring tile centers. Input outside [0,1] is
/// clamped; output stays in [0,1].
pub fn xray_adaptive_hist_eq(
    img: &ImageRecord,
    tiles: (usize, usize),
    clip: f64,
) -> PreprocessResult<ImageRecord> {
    let (tiles_y, tiles_x) = tiles;
    if tiles_y == 0 || tiles_x == 0 {
        return Err(PreprocessError::Param("tile grid must be non-empty".into()));
    }
    if img.height < tiles_y || img.width < tiles_x {
        return Err(PreprocessError::Dim(format!(
            "image {}x{} smaller than tile grid {tiles_y}x{tiles_x}",
            img.height, img.width
        )));
    }
    // Pad with reflect-101 so the image divides evenly into tiles.
    let tile_h = img.height.div_ceil(tiles_y);
    let tile_w = img.width.div_ceil(tiles_x);
    let ph = tile_h * tiles_y;
    let pw = tile_w * tiles_x;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut bins = vec![0u8; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize, img.height);
        for x in 0..pw {
            let sx = reflect(x as isize, img.width);
            let v = img.at(sy, sx).clamp(0.0, 1.0);
            bins[y * pw + x] = (v * 255.0).round() as u8;
        }
    }

    let tile_area = tile_h * tile_w;
    let clip_limit = ((clip * tile_area as f64 / HIST_BINS as f64) as usize).max(1);
    let lut_scale = (HIST_BINS - 1) as f64 / tile_area as f64;
    let mut luts = vec![0u8; tiles_y * tiles_x * HIST_BINS];
    let mut hist = [0usize; HIST_BINS];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            hist.fill(0);
            for y in ty * tile_h..(ty + 1) * tile_h {
                for x in tx * tile_w..(tx + 1) * tile_w {
                    hist[bins[y * pw + x] as usize] += 1;
                }
            }
            let mut clipped = 0usize;
            for h in hist.iter_mut() {
                if *h > clip_limit {
                    clipped += *h - clip_limit;
                    *h = clip_limit;
                }
            }
            let batch = clipped / HIST_BINS;
            let mut residual = clipped - batch * HIST_BINS;
            for h in hist.iter_mut() {
                *h += batch;
            }
            if residual > 0 {
                let step = (HIST_BINS / residual).max(1);
                let mut i = 0;
                while i < HIST_BINS && residual > 0 {
                    hist[i] += 1;
                    residual -= 1;
                    i += step;
                }
            }
            let lut = &mut luts[(ty * tiles_x + tx) * HIST_BINS..][..HIST_BINS];
            let mut cum = 0usize;
            for (i, &h) in hist.iter().enumerate() {
                cum += h;
                lut[i] = (cum as f64 * lut_scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let lut_at = |ty: usize, tx: usize, bin: u8| -> f64 {
        f64::from(luts[(ty * tiles_x + tx) * HIST_BINS + bin as usize])
    };
    let mut out = vec![0.0; img.height * img.width];
    for y in 0..img.height {
        let tyf = y as f64 / tile_h as f64 - 0.5;
        let ty1 = tyf.floor();
        let ya = tyf - ty1;
        let ty1c = (ty1.max(0.0) as usize).min(tiles_y - 1);
        let ty2c = (((ty1 as isize) + 1).max(0) as usize).min(tiles_y - 1);
        for x in 0..img.width {
            let txf = x as f64 / tile_w as f64 - 0.5;
            let tx1 = txf.floor();
            let xa = txf - tx1;
            let tx1c = (tx1.max(0.0) as usize).min(tiles_x - 1);
            let tx2c = (((tx1 as isize) + 1).max(0) as usize).min(tiles_x - 1);
            let b = bins[y * pw + x];
            let v = lut_at(ty1c, tx1c, b) * (1.0 - xa) * (1.0 - ya)
                + lut_at(ty1c, tx2c, b) * xa * (1.0 - ya)
                + lut_at(ty2c, tx1c, b) * (1.0 - xa) * ya
                + lut_at(ty2c, tx2c, b) * xa * ya;
            out[y * img.width + x] = (v / 255.0).clamp(0.0, 1.0);
        }
    }
    ImageRecord::new(out, img.height, img.width)
}

/// `(x - mean) / std` elementwise, leaving the [0,1] carrier.
pub fn xray_normalize(img: &ImageRecord, mean: f64, std: f64) -> PreprocessResult<Tensor> {
    if std <= 0.0 {
        return Err(PreprocessError::Param(format!(
            "std = {std} must be positive"
        )));
    }
    let data: Vec<f64> = img.pixels().iter().map(|&v| (v - mean) / std).collect();
    Tensor::new(vec![img.height, img.width], data)
        .map_err(|e| PreprocessError::Dim(e.to_string()))
}

/// Endpoint-aligned bilinear resize.
fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    let sy = if dh > 1 { (sh - 1) as f64 / (dh - 1) as f64 } else { 0.0 };
    let sx = if dw > 1 { (sw - 1) as f64 / (dw - 1) as f64 } else { 0.0 };
    for y in 0..dh {
        let py = y as f64 * sy;
        let y0 = (py.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fy = py - y0 as f64;
        for x in 0..dw {
            let px = x as f64 * sx;
            let x0 = (px.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let fx = px - x0 as f64;
            let a = src[y0 * sw + x0];
            let b = src[y0 * sw + x1];
            let c = src[y1 * sw + x0];
            let d = src[y1 * sw + x1];
            let top = a + fx * (b - a);
            let bot = c + fx * (d - c);
            out[y * dw + x] = top + fy * (bot - top);
        }
    }
    out
}

/// With probability `scale_prob`: crops a random window of area fraction
/// drawn from `scale_range` and bilinearly resizes it back to full size.
pub fn xray_random_resized_scale(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<ImageRecord> {
    let (out, _) = scale_inner(img, cfg, rng)?;
    Ok(out)
}

fn scale_inner(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<(ImageRecord, bool)> {
    cfg.validate()?;
    if !rng.gen_bool(cfg.scale_prob) {
        return Ok((img.clone(), false));
    }
    let area = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let side = area.sqrt();
    let ch = ((img.height as f64 * side).round() as usize).clamp(1, img.height);
    let cw = ((img.width as f64 * side).round() as usize).clamp(1, img.width);
    let top = rng.gen_range(0..=img.height - ch);
    let left = rng.gen_range(0..=img.width - cw);
    let mut crop = vec![0.0; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            crop[y * cw + x] = img.at(top + y, left + x);
        }
    }
    let resized = resize_bilinear(&crop, ch, cw, img.height, img.width);
    Ok((ImageRecord::new(resized, img.height, img.width)?, true))
}

/// With probability `jitter_prob`: multiplies brightness by a factor in
/// `[1-j, 1+j]` and rescales contrast about the mean by another such factor,
/// clamping to [0,1].
pub fn xray_color_jitter(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<ImageRecord> {
    let (out, _) = jitter_inner(img, cfg, rng)?;
    Ok(out)
}

fn jitter_inner(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<(ImageRecord, bool)> {
    cfg.validate()?;
    if !rng.gen_bool(cfg.jitter_prob) {
        return Ok((img.clone(), false));
    }
    let j = cfg.jitter_max;
    let brightness = rng.gen_range(1.0 - j..=1.0 + j);
    let contrast = rng.gen_range(1.0 - j..=1.0 + j);
    let mut px: Vec<f64> = img.pixels().iter().map(|&v| v * brightness).collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    for v in px.iter_mut() {
        *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
    }
    Ok((ImageRecord::new(px, img.height, img.width)?, true))
}

/// Builds the normalized 1-D Gaussian for an odd kernel size `k` with
/// `sigma = 0.3*((k-1)/2 - 1) + 0.8`.
pub(crate) fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = 0.3 * ((k - 1) as f64 / 2.0 - 1.0) + 0.8;
    let half = (k / 2) as isize;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);
    kernel
}

/// With probability `blur_prob`: separable Gaussian blur with an odd kernel
/// size drawn uniformly from `blur_kernel_range` (even draws re-drawn) and
/// replicated borders.
pub fn xray_gaussian_blur(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<ImageRecord> {
    let (out, _) = blur_inner(img, cfg, rng)?;
    Ok(out)
}

fn blur_inner(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<(ImageRecord, bool)> {
    cfg.validate()?;
    if !rng.gen_bool(cfg.blur_prob) {
        return Ok((img.clone(), false));
    }
    let (lo, hi) = cfg.blur_kernel_range;
    let mut k = rng.gen_range(lo..=hi);
    while k % 2 == 0 {
        k = rng.gen_range(lo..=hi);
    }
    let kernel = gaussian_kernel(k);
    let half = (k / 2) as isize;
    let (h, w) = (img.height, img.width);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - half, w);
                acc += kv * img.at(y, sx);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - half, h);
                acc += kv * rows[sy * w + x];
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    Ok((ImageRecord::new(out, h, w)?, true))
}

/// Which augmentations actually fired during one [`xray_augment`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct XrayAugApplied {
    pub scale: bool,
    pub jitter: bool,
    pub blur: bool,
}

/// Applies scale → jitter → blur, each gated by its configured probability.
pub fn xray_augment(
    img: &ImageRecord,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PreprocessResult<(ImageRecord, XrayAugApplied)> {
    let (scaled, scale) = scale_inner(img, cfg, rng)?;
    let (jittered, jitter) = jitter_inner(&scaled, cfg, rng)?;
    let (blurred, blur) = blur_inner(&jittered, cfg, rng)?;
    Ok((
        blurred,
        XrayAugApplied {
            scale,
            jitter,
            blur,
        },
    ))
}
