//! Note synthesis for unlabeled-text studies and report cleaning.

use regex::Regex;
use std::sync::OnceLock;

use super::{DataError, DataResult, LabelVector, Modality};

/// Builds a note from a diagnosis label vector: `Finding of {name}` for 1,
/// `Uncertain Finding of {name}` for −1, comma-joined in label order.
/// A vector with no nonzero entries has nothing to say and is an error.
pub fn synthesize_note(labels: &LabelVector) -> DataResult<String> {
    let mut parts = Vec::new();
    for (name, v) in labels.entries() {
        match v {
            1 => parts.push(format!("Finding of {name}")),
            -1 => parts.push(format!("Uncertain Finding of {name}")),
            _ => {}
        }
    }
    if parts.is_empty() {
        return Err(DataError::Invalid(
            "cannot synthesize a note from all-zero labels".into(),
        ));
    }
    Ok(parts.join(", "))
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:impression|findings?)\s*:").expect("static regex"))
}

/// Keeps letters, digits, whitespace and ordinary punctuation; anything else
/// (transcription artifacts like `@@@` or control bytes) is dropped, and
/// whitespace runs collapse to single spaces.
fn strip_and_collapse(text: &str) -> String {
    let kept: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() || ".,;:?!()'-/%+".contains(c) {
                c
            } else {
                ' '
            }
        })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Report cleanup per modality.
///
/// X-ray: extracts the text under `Impression:` / `Findings:` headings in
/// order of appearance (whole text if no heading is present). ECG: reports
/// arrive as `|`-separated fields; the first 7 are joined with `, `.
/// Both are then stripped of special characters and collapsed. An empty
/// result is allowed; callers decide whether to flag it.
pub fn clean_report(raw_text: &str, modality: Modality) -> String {
    match modality {
        Modality::Xray => {
            let re = heading_re();
            let spans: Vec<(usize, usize)> = re
                .find_iter(raw_text)
                .map(|m| (m.start(), m.end()))
                .collect();
            if spans.is_empty() {
                return strip_and_collapse(raw_text);
            }
            let mut sections = Vec::new();
            for (i, &(_, body_start)) in spans.iter().enumerate() {
                let body_end = spans.get(i + 1).map_or(raw_text.len(), |&(s, _)| s);
                let body = strip_and_collapse(&raw_text[body_start..body_end]);
                if !body.is_empty() {
                    sections.push(body);
                }
            }
            sections.join(" ")
        }
        Modality::Ecg => {
            let fields: Vec<String> = raw_text
                .split('|')
                .take(7)
                .map(strip_and_collapse)
                .filter(|f| !f.is_empty())
                .collect();
            fields.join(", ")
        }
    }
}
