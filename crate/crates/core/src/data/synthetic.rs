//! Synthetic tri-modal corpus with known latent classes.
//!
//! Each class plants a bright blob at a class-specific image position, a
//! class-specific heart rate + dominant oscillation in the ECG, and a note
//! mentioning the class term — so alignment, retrieval and explanation can
//! be verified end to end without hospital data. Raw records deliberately
//! carry baseline drift, noise and occasional NaNs so the preprocessing
//! pipeline has real work to do.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::preprocess::{EcgRecord, ImageRecord, ECG_LEADS};
use crate::rng::stream;

use super::{
    write_ecg_raw, write_manifest, write_pgm, DataError, DataResult, LabelVector, ManifestRow,
};

const CLASS_TERMS: [&str; 8] = [
    "Cardiomegaly",
    "Edema",
    "Pleural Effusion",
    "Atelectasis",
    "Pneumothorax",
    "Consolidation",
    "Fracture",
    "Opacity",
];

const FILLERS: [&str; 12] = [
    "lungs",
    "clear",
    "stable",
    "heart",
    "size",
    "contour",
    "unchanged",
    "mild",
    "moderate",
    "comparison",
    "prior",
    "silhouette",
];

/// Canonical name of synthetic class `k`.
pub fn class_term(k: usize) -> String {
    CLASS_TERMS
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("Condition {k}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Raw record length in samples (at `ecg_rate_hz`); the preprocessing
    /// pipeline resamples 5000 @ 500 Hz down to the working 1000 @ 100 Hz.
    pub ecg_len: usize,
    pub ecg_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 3,
            n_per_class: 100,
            image_size: 64,
            ecg_len: 5000,
            ecg_rate_hz: 500.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTriple {
    pub subject_id: String,
    pub study_id_x: String,
    pub study_id_e: String,
    pub date_x: i64,
    pub date_e: i64,
    pub image: ImageRecord,
    pub ecg: EcgRecord,
    pub xray_note: String,
    pub ecg_note: String,
    pub label: LabelVector,
    pub class_id: usize,
    /// Center of the planted image motif, (row, col).
    pub motif_center: (usize, usize),
}

impl SyntheticTriple {
    pub fn gap_days(&self) -> i64 {
        (self.date_x - self.date_e).abs()
    }

    /// Bounding box of the planted motif as (y0, y1, x0, x1), exclusive
    /// ends. Every shape's visible extent fits a half-width of about 0.22
    /// of the image side.
    pub fn motif_bbox(&self, image_size: usize) -> (usize, usize, usize, usize) {
        let r = (image_size as f64 * 0.22).ceil() as usize;
        let (cy, cx) = self.motif_center;
        (
            cy.saturating_sub(r),
            (cy + r + 1).min(image_size),
            cx.saturating_sub(r),
            (cx + r + 1).min(image_size),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub triples: Vec<SyntheticTriple>,
    pub class_names: Vec<String>,
    pub cfg: SynthConfig,
}

/// Class-specific intensity profile at radius/offset (dy, dx) from the
/// motif center. Shapes — solid blob, ring, blob pair, bar — survive the
/// training augmentations (crops translate and mildly rescale them, blur
/// smooths them), unlike absolute position, which crops would destroy.
fn motif_intensity(class: usize, size: f64, dy: f64, dx: f64) -> f64 {
    let r2 = dy * dy + dx * dx;
    match class % 4 {
        // Solid blob.
        0 => {
            let sigma = size / 11.0;
            0.65 * (-r2 / (2.0 * sigma * sigma)).exp()
        }
        // Ring.
        1 => {
            let r0 = size / 8.0;
            let w = size / 26.0;
            let r = r2.sqrt();
            0.65 * (-((r - r0) * (r - r0)) / (2.0 * w * w)).exp()
        }
        // Horizontal blob pair.
        2 => {
            let off = size / 10.0;
            let sigma = size / 18.0;
            let left = (dy * dy + (dx + off) * (dx + off)) / (2.0 * sigma * sigma);
            let right = (dy * dy + (dx - off) * (dx - off)) / (2.0 * sigma * sigma);
            0.6 * ((-left).exp() + (-right).exp()).min(1.0)
        }
        // Vertical bar.
        _ => {
            let sx = size / 20.0;
            let half_len = size / 8.0;
            let along = if dy.abs() <= half_len {
                1.0
            } else {
                let over = dy.abs() - half_len;
                (-over * over / (2.0 * sx * sx)).exp()
            };
            0.6 * along * (-dx * dx / (2.0 * sx * sx)).exp()
        }
    }
}

fn gen_image(
    class: usize,
    _n_classes: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageRecord, (usize, usize)) {
    let s = size as f64;
    // Jitter keeps the whole structure inside every legal training crop.
    let jitter = s / 13.0;
    let cy = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let cx = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let mut px = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = rng.gen_range(-0.05..0.05);
            let motif = motif_intensity(class, s, y as f64 - cy, x as f64 - cx);
            px[y * size + x] = (0.25 + noise + motif).clamp(0.0, 1.0);
        }
    }
    let img = ImageRecord::new(px, size, size).expect("synthetic image geometry");
    (img, (cy.round() as usize, cx.round() as usize))
}

fn gen_ecg(class: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (EcgRecord, f64) {
    let len = cfg.ecg_len;
    let rate = cfg.ecg_rate_hz;
    let bpm = 55.0 + 20.0 * class as f64;
    let beat_period = 60.0 / bpm; // seconds
    let osc_hz = 0.9 + 0.6 * class as f64;
    let mut rec = EcgRecord::zeros(len, rate);
    let drift_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let beat_offset: f64 = rng.gen_range(0.0..beat_period);
    for li in 0..ECG_LEADS {
        let lead_scale = 0.6 + 0.4 * li as f64 / (ECG_LEADS - 1) as f64;
        let lead = rec.lead_mut(li);
        for (i, v) in lead.iter_mut().enumerate() {
            let t = i as f64 / rate;
            // Slow drift plus a linear trend; both removed by preprocessing.
            let drift = 0.4 * (std::f64::consts::TAU * 0.2 * t + drift_phase).sin() + 0.15 * t;
            let osc = 0.25 * (std::f64::consts::TAU * osc_hz * t).sin();
            // QRS-like bump nearest to this instant.
            let phase = (t + beat_offset) % beat_period;
            let d = phase.min(beat_period - phase) * rate;
            let spike = 1.2 * (-d * d / (2.0 * 6.0 * 6.0)).exp();
            let noise: f64 = rng.gen_range(-0.05..0.05);
            *v = lead_scale * (osc + spike) + drift + noise;
        }
        // Raw hospital dumps contain missing samples; plant a few NaNs.
        for _ in 0..2 {
            if rng.gen_bool(0.3) {
                let at = rng.gen_range(0..len);
                lead[at] = f64::NAN;
            }
        }
    }
    (rec, bpm)
}

fn gen_notes(term: &str, bpm: f64, rng: &mut ChaCha8Rng) -> (String, String) {
    let pick = |rng: &mut ChaCha8Rng| FILLERS[rng.gen_range(0..FILLERS.len())];
    let f1 = pick(rng);
    let f2 = pick(rng);
    let f3 = pick(rng);
    let xray = format!(
        "FINDINGS: The {f1} {f2} appears {f3}. {term} is present. IMPRESSION: Finding of {term}."
    );
    let extra = pick(rng);
    let ecg = format!(
        "Sinus rhythm | {term} pattern | rate {bpm:.0} bpm | normal axis | no ectopy | {extra} noted | otherwise unremarkable | lead check ok | tech quality fair"
    );
    (xray, ecg)
}

/// Generates `n_classes * n_per_class` class-balanced triples,
/// deterministically per seed.
pub fn gen_synthetic_triples(cfg: &SynthConfig) -> DataResult<SyntheticDataset> {
    if cfg.n_classes < 2 {
        return Err(DataError::Invalid(
            "synthetic generator needs at least 2 classes".into(),
        ));
    }
    if cfg.image_size < ImageRecord::MIN_SIDE {
        return Err(DataError::Invalid(format!(
            "image_size {} below minimum {}",
            cfg.image_size,
            ImageRecord::MIN_SIDE
        )));
    }
    let class_names: Vec<String> = (0..cfg.n_classes).map(class_term).collect();
    let mut triples = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for idx in 0..cfg.n_classes * cfg.n_per_class {
        let class = idx % cfg.n_classes;
        let mut rng = stream(cfg.seed, "synth-triple", &[idx as u64]);
        let (image, motif_center) = gen_image(class, cfg.n_classes, cfg.image_size, &mut rng);
        let (ecg, bpm) = gen_ecg(class, cfg, &mut rng);
        let (xray_note, ecg_note) = gen_notes(&class_names[class], bpm, &mut rng);
        let date_x: i64 = rng.gen_range(18000..19000);
        let date_e = date_x + rng.gen_range(-60..=60);
        let label = LabelVector::new(
            class_names
                .iter()
                .enumerate()
                .map(|(k, name)| (name.clone(), i8::from(k == class)))
                .collect(),
        )?;
        triples.push(SyntheticTriple {
            subject_id: format!("S{idx:05}"),
            study_id_x: format!("X{idx:05}"),
            study_id_e: format!("E{idx:05}"),
            date_x,
            date_e,
            image,
            ecg,
            xray_note,
            ecg_note,
            label,
            class_id: class,
            motif_center,
        });
    }
    Ok(SyntheticDataset {
        triples,
        class_names,
        cfg: cfg.clone(),
    })
}

/// Writes payload files (`images/*.pgm`, `ecgs/*.ecg`) plus `manifest.tsv`
/// under `dir`. Byte-identical across runs with the same dataset.
pub fn write_synthetic_dataset(dir: &Path, ds: &SyntheticDataset) -> DataResult<Vec<ManifestRow>> {
    let images = dir.join("images");
    let ecgs = dir.join("ecgs");
    std::fs::create_dir_all(&images).map_err(|e| super::io_err(&images, e))?;
    std::fs::create_dir_all(&ecgs).map_err(|e| super::io_err(&ecgs, e))?;
    let mut rows = Vec::with_capacity(ds.triples.len());
    for t in &ds.triples {
        let image_rel = format!("images/{}.pgm", t.study_id_x);
        let ecg_rel = format!("ecgs/{}.ecg", t.study_id_e);
        write_pgm(&dir.join(&image_rel), &t.image)?;
        write_ecg_raw(&dir.join(&ecg_rel), &t.ecg)?;
        rows.push(ManifestRow {
            subject_id: t.subject_id.clone(),
            study_id_x: t.study_id_x.clone(),
            study_id_e: t.study_id_e.clone(),
            image_path: image_rel,
            ecg_path: ecg_rel,
            xray_note: t.xray_note.clone(),
            ecg_note: t.ecg_note.clone(),
            labels: t.label.clone(),
            gap_days: t.gap_days(),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &rows)?;
    Ok(rows)
}
