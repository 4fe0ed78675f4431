//! Manifest → model-ready data: payload loading, static preprocessing
//! (resample/NaN/baseline/min-max for ECG, CLAHE for images), note cleaning,
//! tokenization and train-time augmentation. Records are independent, so
//! loading and preprocessing fan out across threads; every random choice is
//! keyed by (seed, record index) and results land by index, keeping outputs
//! bit-identical regardless of scheduling.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{
    clean_report, join_reports, read_ecg_raw, read_pgm, Tokenizer, {build_tokenizer, LabelVector},
    {DataError, DataResult, ManifestRow, Modality},
};
use crate::model::BatchInput;
use crate::preprocess::{
    ecg_augment, ecg_preprocess, xray_augment, xray_normalize, AugmentConfig, EcgRecord,
    ImageRecord,
};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub target_hz: f64,
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f64,
    pub min_token_freq: usize,
    pub max_gap_days: i64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            target_hz: 100.0,
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            min_token_freq: 1,
            max_gap_days: 60,
        }
    }
}

/// One statically preprocessed sample, ready for (optional) augmentation,
/// normalization and encoding.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub subject_id: String,
    pub study_id_x: String,
    pub study_id_e: String,
    pub image: ImageRecord,
    pub ecg: EcgRecord,
    pub xray_note: String,
    pub ecg_note: String,
    pub token_ids: Vec<u32>,
    pub label: LabelVector,
    pub class_id: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub samples: Vec<PreparedSample>,
    pub tokenizer: Tokenizer,
    /// Mean/std of the equalized training images, used for normalization.
    pub norm_mean: f64,
    pub norm_std: f64,
    pub class_names: Vec<String>,
}

struct LoadedRow {
    subject_id: String,
    study_id_x: String,
    study_id_e: String,
    image: ImageRecord,
    ecg: EcgRecord,
    xray_note: String,
    ecg_note: String,
    label: LabelVector,
}

fn load_rows(rows: &[ManifestRow], base_dir: &Path, cfg: &PrepareConfig) -> DataResult<Vec<LoadedRow>> {
    rows.par_iter()
        .map(|row| {
            let image = read_pgm(&base_dir.join(&row.image_path))?;
            let raw_ecg = read_ecg_raw(&base_dir.join(&row.ecg_path))?;
            let image = crate::preprocess::xray_adaptive_hist_eq(
                &image,
                cfg.clahe_tiles,
                cfg.clahe_clip,
            )
            .map_err(|e| DataError::Invalid(e.to_string()))?;
            let ecg = ecg_preprocess(&raw_ecg, cfg.target_hz)
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            Ok(LoadedRow {
                subject_id: row.subject_id.clone(),
                study_id_x: row.study_id_x.clone(),
                study_id_e: row.study_id_e.clone(),
                image,
                ecg,
                xray_note: clean_report(&row.xray_note, Modality::Xray),
                ecg_note: clean_report(&row.ecg_note, Modality::Ecg),
                label: row.labels.clone(),
            })
        })
        .collect()
}

fn class_names_from(rows: &[ManifestRow]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for row in rows {
        for (name, _) in row.labels.entries() {
            if !names.iter().any(|n| n == name) {
                names.push(name.clone());
            }
        }
    }
    names
}

/// Statically preprocesses training rows, building the tokenizer from their
/// cleaned notes and the normalization statistics from their equalized
/// images. Rows whose study gap exceeds `max_gap_days` are dropped.
pub fn prepare_dataset(
    rows: &[ManifestRow],
    base_dir: &Path,
    cfg: &PrepareConfig,
) -> DataResult<PreparedDataset> {
    let kept: Vec<ManifestRow> = rows
        .iter()
        .filter(|r| r.gap_days <= cfg.max_gap_days)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(DataError::Invalid(
            "no manifest rows within the study-gap window".into(),
        ));
    }
    let loaded = load_rows(&kept, base_dir, cfg)?;
    let corpus: Vec<String> = loaded
        .iter()
        .flat_map(|r| [r.xray_note.clone(), r.ecg_note.clone()])
        .collect();
    let tokenizer = build_tokenizer(&corpus, cfg.min_token_freq)?;
    let n_px: usize = loaded.iter().map(|r| r.image.pixels().len()).sum();
    let mean = loaded
        .iter()
        .flat_map(|r| r.image.pixels())
        .sum::<f64>()
        / n_px as f64;
    let var = loaded
        .iter()
        .flat_map(|r| r.image.pixels())
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n_px as f64;
    let std = var.sqrt().max(1e-6);
    let class_names = class_names_from(&kept);
    let samples = finalize_samples(loaded, &tokenizer, &class_names);
    Ok(PreparedDataset {
        samples,
        tokenizer,
        norm_mean: mean,
        norm_std: std,
        class_names,
    })
}

/// Preprocesses evaluation rows with an existing tokenizer (vocabulary and
/// normalization statistics always come from the training split).
pub fn prepare_eval_rows(
    rows: &[ManifestRow],
    base_dir: &Path,
    cfg: &PrepareConfig,
    tokenizer: &Tokenizer,
    class_names: &[String],
) -> DataResult<Vec<PreparedSample>> {
    let loaded = load_rows(rows, base_dir, cfg)?;
    Ok(finalize_samples(loaded, tokenizer, class_names))
}

fn finalize_samples(
    loaded: Vec<LoadedRow>,
    tokenizer: &Tokenizer,
    class_names: &[String],
) -> Vec<PreparedSample> {
    loaded
        .into_iter()
        .map(|r| {
            let token_ids = join_reports(&r.xray_note, &r.ecg_note, tokenizer);
            let class_id = r.label.primary_class().and_then(|idx| {
                r.label
                    .entries()
                    .get(idx)
                    .and_then(|(name, _)| class_names.iter().position(|c| c == name))
            });
            PreparedSample {
                subject_id: r.subject_id,
                study_id_x: r.study_id_x,
                study_id_e: r.study_id_e,
                image: r.image,
                ecg: r.ecg,
                xray_note: r.xray_note,
                ecg_note: r.ecg_note,
                token_ids,
                label: r.label,
                class_id,
            }
        })
        .collect()
}

/// Seeded subject-level split: all of a subject's samples land on one side.
/// Returns (train indices, validation indices).
pub fn split_by_subject(
    samples: &[PreparedSample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut subjects: Vec<&str> = Vec::new();
    for s in samples {
        if !subjects.contains(&s.subject_id.as_str()) {
            subjects.push(&s.subject_id);
        }
    }
    let mut rng = stream(seed, "subject-split", &[]);
    subjects.shuffle(&mut rng);
    let n_val = ((subjects.len() as f64) * val_fraction).round() as usize;
    let val_set: std::collections::BTreeSet<&str> =
        subjects.iter().take(n_val).copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if val_set.contains(s.subject_id.as_str()) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Assembles a train-mode micro-batch: augment both payload modalities with
/// per-(epoch, index) streams, then normalize images with the training
/// statistics. Augmentation fans out across threads; outputs land by index.
pub fn augmented_batch(
    ds: &PreparedDataset,
    indices: &[usize],
    aug: &AugmentConfig,
    epoch: usize,
    seed: u64,
) -> DataResult<BatchInput> {
    let parts: Vec<(Tensor, EcgRecord, Vec<u32>)> = indices
        .par_iter()
        .map(|&idx| {
            let s = &ds.samples[idx];
            let mut rng = stream(seed, "augment", &[epoch as u64, idx as u64]);
            let (img, _) = xray_augment(&s.image, aug, &mut rng)
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            let ecg = ecg_augment(&s.ecg, aug, &mut rng)
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            let img = xray_normalize(&img, ds.norm_mean, ds.norm_std)
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            Ok((img, ecg, s.token_ids.clone()))
        })
        .collect::<DataResult<Vec<_>>>()?;
    let mut batch = BatchInput {
        images: Vec::with_capacity(parts.len()),
        ecgs: Vec::with_capacity(parts.len()),
        token_ids: Vec::with_capacity(parts.len()),
    };
    for (img, ecg, ids) in parts {
        batch.images.push(img);
        batch.ecgs.push(ecg);
        batch.token_ids.push(ids);
    }
    Ok(batch)
}

/// Assembles an eval-mode micro-batch: no augmentation, just normalization.
pub fn eval_batch(
    ds_stats: (f64, f64),
    samples: &[&PreparedSample],
) -> DataResult<BatchInput> {
    let (mean, std) = ds_stats;
    let mut batch = BatchInput {
        images: Vec::with_capacity(samples.len()),
        ecgs: Vec::with_capacity(samples.len()),
        token_ids: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        batch.images.push(
            xray_normalize(&s.image, mean, std).map_err(|e| DataError::Invalid(e.to_string()))?,
        );
        batch.ecgs.push(s.ecg.clone());
        batch.token_ids.push(s.token_ids.clone());
    }
    Ok(batch)
}

// ---- eval-mode embedding extraction -------------------------------------------

use crate::encoders::Graph;
use crate::eval::{ClassPrompts, PromptBank};
use crate::model::MoreModel;
use crate::objective::EmbeddingBatch;
use crate::tensor::{Mode, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedModality {
    Xray,
    Ecg,
    Text,
}

impl EmbedModality {
    fn tag(self) -> &'static str {
        match self {
            EmbedModality::Xray => "xray",
            EmbedModality::Ecg => "ecg",
            EmbedModality::Text => "text",
        }
    }
}

const EMBED_CHUNK: usize = 16;

/// Projects samples of one modality into the shared space (eval mode,
/// chunked). Row ids are the modality's study ids.
pub fn embed_samples(
    model: &MoreModel,
    samples: &[&PreparedSample],
    stats: (f64, f64),
    modality: EmbedModality,
) -> TensorResult<EmbeddingBatch> {
    if samples.is_empty() {
        return Err(TensorError::Param("nothing to embed".into()));
    }
    let dim = model.cfg.proj.out_dim;
    let mut data = Vec::with_capacity(samples.len() * dim);
    let mut ids = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_CHUNK) {
        let batch = eval_batch(stats, chunk).map_err(|e| TensorError::Param(e.to_string()))?;
        let mut g = Graph::new(&model.store);
        let mut rng = stream(0, "embed", &[]);
        let (prefix, cls) = match modality {
            EmbedModality::Xray => (
                crate::model::IMG,
                model.encode_images(&mut g, &batch.images, Mode::Eval, &mut rng)?.cls,
            ),
            EmbedModality::Ecg => (
                crate::model::ECG,
                model.encode_ecgs(&mut g, &batch.ecgs, Mode::Eval, &mut rng)?.cls,
            ),
            EmbedModality::Text => (
                crate::model::TEXT,
                model
                    .encode_texts(&mut g, &batch.token_ids, Mode::Eval, &mut rng)?
                    .cls,
            ),
        };
        let z = model.project_cls(&mut g, prefix, cls, Mode::Eval)?;
        data.extend_from_slice(g.tape.value(z).data());
        for s in chunk {
            ids.push(match modality {
                EmbedModality::Xray => s.study_id_x.clone(),
                EmbedModality::Ecg => s.study_id_e.clone(),
                EmbedModality::Text => format!("{}:{}", s.study_id_x, s.study_id_e),
            });
        }
    }
    EmbeddingBatch::new(
        Tensor::new(vec![samples.len(), dim], data)?,
        modality.tag(),
        ids,
    )
}

/// Embeds free text through the text branch (eval mode). The text fills both
/// report segments so a single phrase addresses either payload modality.
pub fn embed_text_queries(
    model: &MoreModel,
    queries: &[(String, String)],
) -> TensorResult<EmbeddingBatch> {
    if queries.is_empty() {
        return Err(TensorError::Param("no text queries".into()));
    }
    let dim = model.cfg.proj.out_dim;
    let mut data = Vec::with_capacity(queries.len() * dim);
    let mut ids = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EMBED_CHUNK) {
        let token_ids: Vec<Vec<u32>> = chunk
            .iter()
            .map(|(_, text)| join_reports(text, text, &model.tokenizer))
            .collect();
        let mut g = Graph::new(&model.store);
        let mut rng = stream(0, "embed-text", &[]);
        let out = model.encode_texts(&mut g, &token_ids, Mode::Eval, &mut rng)?;
        let z = model.project_cls(&mut g, crate::model::TEXT, out.cls, Mode::Eval)?;
        data.extend_from_slice(g.tape.value(z).data());
        ids.extend(chunk.iter().map(|(id, _)| id.clone()));
    }
    EmbeddingBatch::new(Tensor::new(vec![queries.len(), dim], data)?, "text", ids)
}

/// Builds a prompt bank by embedding each class's prompts. When no explicit
/// prompts are supplied, the templates mirror the note-synthesis wording:
/// `Finding of {class}`.
pub fn build_prompt_bank(
    model: &MoreModel,
    classes: &[(String, Vec<String>)],
) -> TensorResult<PromptBank> {
    let mut bank = PromptBank {
        classes: Vec::with_capacity(classes.len()),
    };
    for (class, prompts) in classes {
        let prompts = if prompts.is_empty() {
            vec![format!("Finding of {class}")]
        } else {
            prompts.clone()
        };
        let queries: Vec<(String, String)> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("{class}:{i}"), p.clone()))
            .collect();
        let batch = embed_text_queries(model, &queries)?;
        let embeddings = (0..batch.len()).map(|i| batch.row(i).to_vec()).collect();
        bank.classes.push(ClassPrompts {
            class: class.clone(),
            prompts,
            embeddings,
        });
    }
    Ok(bank)
}

// ---- sidecar metadata -----------------------------------------------------------

/// Inference context that does not live in the parameter store: the
/// tokenizer vocabulary, class names, and the image normalization
/// statistics. Persisted next to checkpoints as two TSV sidecars
/// (`<stem>.vocab.tsv`, `<stem>.meta.tsv`).
#[derive(Debug, Clone)]
pub struct ModelAux {
    pub tokenizer: Tokenizer,
    pub class_names: Vec<String>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl ModelAux {
    pub fn from_dataset(ds: &PreparedDataset) -> Self {
        ModelAux {
            tokenizer: ds.tokenizer.clone(),
            class_names: ds.class_names.clone(),
            norm_mean: ds.norm_mean,
            norm_std: ds.norm_std,
        }
    }

    pub fn stats(&self) -> (f64, f64) {
        (self.norm_mean, self.norm_std)
    }

    fn vocab_path(ckpt: &Path) -> std::path::PathBuf {
        ckpt.with_extension("vocab.tsv")
    }

    fn meta_path(ckpt: &Path) -> std::path::PathBuf {
        ckpt.with_extension("meta.tsv")
    }

    pub fn save(&self, ckpt_path: &Path) -> DataResult<()> {
        self.tokenizer.save(&Self::vocab_path(ckpt_path))?;
        let meta = Self::meta_path(ckpt_path);
        let mut out = String::from("key\tvalue\n");
        out.push_str(&format!("norm_mean\t{:e}\n", self.norm_mean));
        out.push_str(&format!("norm_std\t{:e}\n", self.norm_std));
        for (i, c) in self.class_names.iter().enumerate() {
            out.push_str(&format!("class_{i}\t{c}\n"));
        }
        std::fs::write(&meta, out).map_err(|e| crate::data::io_err(&meta, e))
    }

    pub fn load(ckpt_path: &Path) -> DataResult<Self> {
        let tokenizer = Tokenizer::load(&Self::vocab_path(ckpt_path))?;
        let meta = Self::meta_path(ckpt_path);
        let text = std::fs::read_to_string(&meta).map_err(|e| crate::data::io_err(&meta, e))?;
        let mut norm_mean = None;
        let mut norm_std = None;
        let mut classes: Vec<(usize, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('\t').ok_or(DataError::Manifest {
                line: lineno + 1,
                msg: "expected key\\tvalue".into(),
            })?;
            match key {
                "norm_mean" => norm_mean = value.parse().ok(),
                "norm_std" => norm_std = value.parse().ok(),
                k => {
                    if let Some(idx) = k.strip_prefix("class_") {
                        let idx: usize = idx.parse().map_err(|_| DataError::Manifest {
                            line: lineno + 1,
                            msg: format!("bad class index {k:?}"),
                        })?;
                        classes.push((idx, value.to_string()));
                    } else {
                        return Err(DataError::Manifest {
                            line: lineno + 1,
                            msg: format!("unknown key {k:?}"),
                        });
                    }
                }
            }
        }
        classes.sort();
        Ok(ModelAux {
            tokenizer,
            class_names: classes.into_iter().map(|(_, c)| c).collect(),
            norm_mean: norm_mean
                .ok_or_else(|| DataError::Invalid("meta missing norm_mean".into()))?,
            norm_std: norm_std
                .ok_or_else(|| DataError::Invalid("meta missing norm_std".into()))?,
        })
    }
}
