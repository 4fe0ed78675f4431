//! Word-level tokenizer with the four specials the text encoder expects,
//! plus the two-report joining rule.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{io_err, DataError, DataResult};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Maximum joined-report length in token ids, separators included.
pub const MAX_TEXT_LEN: usize = 512;

/// Lowercased word-level vocabulary: words are `[a-z0-9]+` runs, punctuation
/// characters are single-character tokens, whitespace separates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
}

/// Splits text into lowercase word and punctuation tokens.
pub(crate) fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Builds a vocabulary from `corpus`, keeping tokens seen at least
/// `min_freq` times. Ids are stable: specials first, then tokens in
/// lexicographic order.
pub fn build_tokenizer<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> DataResult<Tokenizer> {
    if corpus.is_empty() {
        return Err(DataError::Invalid("empty tokenizer corpus".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for tok in split_tokens(text.as_ref()) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    vocab.extend(
        counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .map(|(t, _)| t),
    );
    let index = vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(Tokenizer { vocab, index })
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Content-token encoding; out-of-vocabulary tokens become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joined inverse of [`Tokenizer::encode`]; exact up to whitespace
    /// normalization for in-vocabulary text.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| self.token_of(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> DataResult<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| io_err(path, e))?,
        );
        for (i, tok) in self.vocab.iter().enumerate() {
            writeln!(f, "{i}\t{tok}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> DataResult<Tokenizer> {
        let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut vocab = Vec::new();
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line.split_once('\t').ok_or(DataError::Manifest {
                line: lineno + 1,
                msg: "expected id\\ttoken".into(),
            })?;
            let id: usize = id.parse().map_err(|_| DataError::Manifest {
                line: lineno + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != vocab.len() {
                return Err(DataError::Manifest {
                    line: lineno + 1,
                    msg: format!("id {id} out of order"),
                });
            }
            vocab.push(tok.to_string());
        }
        if vocab.len() < SPECIALS.len() {
            return Err(DataError::Invalid("vocabulary missing specials".into()));
        }
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Tokenizer { vocab, index })
    }
}

/// `[CLS] xray [SEP] ecg [SEP]`, truncated to [`MAX_TEXT_LEN`] ids.
///
/// Truncation removes tail tokens but always terminates the sequence with a
/// separator; an empty note contributes an empty segment while keeping both
/// separators.
pub fn join_reports(xray_note: &str, ecg_note: &str, tokenizer: &Tokenizer) -> Vec<u32> {
    let mut ids = Vec::with_capacity(64);
    ids.push(CLS_ID);
    ids.extend(tokenizer.encode(xray_note));
    ids.push(SEP_ID);
    ids.extend(tokenizer.encode(ecg_note));
    ids.push(SEP_ID);
    if ids.len() > MAX_TEXT_LEN {
        ids.truncate(MAX_TEXT_LEN);
        ids[MAX_TEXT_LEN - 1] = SEP_ID;
    }
    ids
}
