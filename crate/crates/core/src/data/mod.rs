//! Corpus construction: study matching, note synthesis and cleaning,
//! tokenization, the synthetic tri-modal generator and the on-disk formats
//! (TSV manifest, binary PGM images, raw ECG records).

mod io;
mod manifest;
mod matching;
mod notes;
mod synthetic;
mod tokenizer;

pub use io::{read_ecg_raw, read_pgm, write_ecg_raw, write_pgm};
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use matching::{match_pairs, MatchedPair};
pub use notes::{clean_report, synthesize_note};
pub use synthetic::{
    class_term, gen_synthetic_triples, write_synthetic_dataset, SynthConfig, SyntheticDataset,
    SyntheticTriple,
};
pub use tokenizer::{build_tokenizer, join_reports, Tokenizer, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("manifest parse error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

pub type DataResult<T> = Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Xray,
    Ecg,
}

/// Diagnosis labels as ordered (name, value) entries with values in
/// {1 finding, 0 absent, −1 uncertain}. Order is the canonical label order
/// fixed at construction; note synthesis and metric output follow it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelVector(Vec<(String, i8)>);

impl LabelVector {
    pub fn new(entries: Vec<(String, i8)>) -> DataResult<Self> {
        for (name, v) in &entries {
            if name.is_empty() {
                return Err(DataError::Invalid("empty label name".into()));
            }
            if !matches!(v, -1 | 0 | 1) {
                return Err(DataError::Invalid(format!(
                    "label {name} has value {v}, expected -1/0/1"
                )));
            }
        }
        Ok(LabelVector(entries))
    }

    pub fn entries(&self) -> &[(String, i8)] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<i8> {
        self.0.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Index of the first positive label, if any.
    pub fn primary_class(&self) -> Option<usize> {
        self.0.iter().position(|&(_, v)| v == 1)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `name:value;name:value` manifest encoding.
    pub fn encode(&self) -> String {
        self.0
            .iter()
            .map(|(n, v)| format!("{n}:{v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(s: &str) -> DataResult<Self> {
        if s.is_empty() {
            return Ok(LabelVector::default());
        }
        let mut entries = Vec::new();
        for part in s.split(';') {
            let (name, value) = part
                .rsplit_once(':')
                .ok_or_else(|| DataError::Invalid(format!("bad label entry {part:?}")))?;
            let v: i8 = value
                .parse()
                .map_err(|_| DataError::Invalid(format!("bad label value {value:?}")))?;
            entries.push((name.to_string(), v));
        }
        LabelVector::new(entries)
    }
}

/// One imaging or ECG study of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub subject_id: String,
    pub study_id: String,
    pub modality: Modality,
    /// Days since epoch; de-identified dates only need differences.
    pub study_date: i64,
    pub payload_path: PathBuf,
    pub note: Option<String>,
    pub labels: Option<LabelVector>,
}

impl StudyRecord {
    pub fn validate(&self) -> DataResult<()> {
        if self.subject_id.is_empty() || self.study_id.is_empty() {
            return Err(DataError::Invalid(
                "subject_id and study_id must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

/// A fully materialized pre-training sample.
#[derive(Debug, Clone)]
pub struct TripleSample {
    pub subject_id: String,
    pub image: crate::preprocess::ImageRecord,
    pub ecg: crate::preprocess::EcgRecord,
    pub xray_note: String,
    pub ecg_note: String,
    pub label: LabelVector,
    pub gap_days: i64,
}
