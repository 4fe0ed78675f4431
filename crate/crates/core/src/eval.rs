//! Ranking metrics, zero-shot classification, cross-modal retrieval and
//! score fusion.
//!
//! AUROC uses the rank-based Mann–Whitney form with ties counted half;
//! AUPRC is the step-wise area over descending-score thresholds (tied
//! scores handled as one threshold group). Retrieval ranks by cosine with
//! stable ties in corpus order.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::objective::EmbeddingBatch;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Scores and binary labels, index-aligned.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> EvalResult<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::with_ids(scores, labels, ids)
    }

    pub fn with_ids(scores: Vec<f64>, labels: Vec<bool>, ids: Vec<String>) -> EvalResult<Self> {
        if scores.len() != labels.len() || scores.len() != ids.len() {
            return Err(EvalError::Invalid(
                "scores, labels and ids must have equal length".into(),
            ));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(EvalError::Invalid(format!("non-finite score {bad}")));
        }
        Ok(ScoredSet { scores, labels, ids })
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (average-rank Mann–Whitney). Needs at least one of each.
pub fn auroc(set: &ScoredSet) -> EvalResult<f64> {
    let n_pos = set.labels.iter().filter(|&&l| l).count();
    let n_neg = set.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if set.labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under precision-recall via a step-wise sweep over descending score
/// thresholds; tied scores enter together.
pub fn auprc(set: &ScoredSet) -> EvalResult<f64> {
    let n_pos = set.labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(EvalError::Undefined("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if set.labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Per-class text prompts with their projected unit embeddings.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub classes: Vec<ClassPrompts>,
}

#[derive(Debug, Clone)]
pub struct ClassPrompts {
    pub class: String,
    pub prompts: Vec<String>,
    /// One unit embedding per prompt.
    pub embeddings: Vec<Vec<f64>>,
}

impl PromptBank {
    pub fn validate(&self) -> EvalResult<()> {
        if self.classes.is_empty() {
            return Err(EvalError::Invalid("empty prompt bank".into()));
        }
        for c in &self.classes {
            if c.embeddings.is_empty() {
                return Err(EvalError::Invalid(format!(
                    "class {} has no prompts",
                    c.class
                )));
            }
            for e in &c.embeddings {
                let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(EvalError::Invalid(format!(
                        "prompt embedding for {} has norm {norm}",
                        c.class
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw per-class scores: max cosine over the class's prompts. No threshold
/// or calibration — AUROC consumes the scores as-is.
pub fn zero_shot_classify(item: &[f64], bank: &PromptBank) -> EvalResult<Vec<f64>> {
    bank.validate()?;
    Ok(bank
        .classes
        .iter()
        .map(|c| {
            c.embeddings
                .iter()
                .map(|e| dot(item, e))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// One ranked retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub index: usize,
    pub id: String,
    pub similarity: f64,
}

/// Descending-cosine ranking of the corpus against one query embedding;
/// ties keep corpus order.
pub fn retrieve(query: &[f64], corpus: &EmbeddingBatch, top_k: usize) -> EvalResult<Vec<RetrievalHit>> {
    if corpus.is_empty() {
        return Err(EvalError::Invalid("empty retrieval corpus".into()));
    }
    let mut hits: Vec<RetrievalHit> = (0..corpus.len())
        .map(|i| RetrievalHit {
            index: i,
            id: corpus.sample_ids[i].clone(),
            similarity: dot(query, corpus.row(i)),
        })
        .collect();
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index)));
    hits.truncate(top_k);
    Ok(hits)
}

/// Mean over queries of the top-k same-class fraction.
pub fn precision_at_k(
    queries: &[Vec<f64>],
    query_classes: &[usize],
    corpus: &EmbeddingBatch,
    corpus_classes: &[usize],
    k: usize,
) -> EvalResult<f64> {
    if k == 0 {
        return Err(EvalError::Invalid("k must be positive".into()));
    }
    if k > corpus.len() {
        return Err(EvalError::Invalid(format!(
            "k = {k} exceeds corpus size {}",
            corpus.len()
        )));
    }
    if queries.len() != query_classes.len() || corpus.len() != corpus_classes.len() {
        return Err(EvalError::Invalid("class labels must align with embeddings".into()));
    }
    if queries.is_empty() {
        return Err(EvalError::Invalid("no queries".into()));
    }
    let mut total = 0.0;
    for (q, &qc) in queries.iter().zip(query_classes) {
        let hits = retrieve(q, corpus, k)?;
        let same = hits
            .iter()
            .filter(|h| corpus_classes[h.index] == qc)
            .count();
        total += same as f64 / k as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Convex combination of per-class score vectors from the two imaging
/// modalities (the 3-day-matched fused inference).
pub fn fused_inference(xray_scores: &[f64], ecg_scores: &[f64], weight: f64) -> EvalResult<Vec<f64>> {
    if xray_scores.len() != ecg_scores.len() {
        return Err(EvalError::Invalid(format!(
            "unmatched pair: {} X-ray scores vs {} ECG scores",
            xray_scores.len(),
            ecg_scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(EvalError::Invalid(format!(
            "fusion weight {weight} outside [0,1]"
        )));
    }
    Ok(xray_scores
        .iter()
        .zip(ecg_scores)
        .map(|(&x, &e)| weight * x + (1.0 - weight) * e)
        .collect())
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `metric \t class \t value` rows.
pub fn write_metrics_tsv(path: &Path, rows: &[(String, String, f64)]) -> EvalResult<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    writeln!(f, "metric\tclass\tvalue").map_err(|e| io_err(path, e))?;
    for (metric, class, value) in rows {
        writeln!(f, "{metric}\t{class}\t{value:.6}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// `query_id \t rank \t corpus_id \t similarity \t label_match` rows.
pub fn write_retrieval_tsv(
    path: &Path,
    rows: &[(String, usize, String, f64, bool)],
) -> EvalResult<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    writeln!(f, "query_id\trank\tcorpus_id\tsimilarity\tlabel_match").map_err(|e| io_err(path, e))?;
    for (query_id, rank, corpus_id, sim, matched) in rows {
        writeln!(f, "{query_id}\t{rank}\t{corpus_id}\t{sim:.6}\t{matched}")
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
