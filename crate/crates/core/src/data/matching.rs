//! Matched-subset construction: all X-ray × ECG study combinations per
//! subject, filtered by the study-date gap.

use std::collections::BTreeMap;

use super::{DataError, DataResult, Modality, StudyRecord};

/// One matched X-ray/ECG study pair of a single subject.
#[derive(Debug, Clone)]
pub struct MatchedPair {
    pub subject_id: String,
    pub xray: StudyRecord,
    pub ecg: StudyRecord,
    pub gap_days: i64,
}

/// Cross product of each subject's X-ray and ECG studies, keeping pairs with
/// `|date_x - date_e| <= max_gap_days` (60 for pre-training, 3 for fused
/// inference). Output is ordered by (subject, X-ray study, ECG study);
/// subjects with a missing modality contribute nothing.
pub fn match_pairs(
    xrays: &[StudyRecord],
    ecgs: &[StudyRecord],
    max_gap_days: i64,
) -> DataResult<Vec<MatchedPair>> {
    if max_gap_days < 0 {
        return Err(DataError::Invalid("max_gap_days must be >= 0".into()));
    }
    let mut by_subject: BTreeMap<&str, (Vec<&StudyRecord>, Vec<&StudyRecord>)> = BTreeMap::new();
    for x in xrays {
        x.validate()?;
        if x.modality != Modality::Xray {
            return Err(DataError::Invalid(format!(
                "study {} passed as X-ray but tagged {:?}",
                x.study_id, x.modality
            )));
        }
        by_subject.entry(&x.subject_id).or_default().0.push(x);
    }
    for e in ecgs {
        e.validate()?;
        if e.modality != Modality::Ecg {
            return Err(DataError::Invalid(format!(
                "study {} passed as ECG but tagged {:?}",
                e.study_id, e.modality
            )));
        }
        by_subject.entry(&e.subject_id).or_default().1.push(e);
    }
    let mut pairs = Vec::new();
    for (subject, (xs, es)) in by_subject {
        let mut xs = xs;
        let mut es = es;
        xs.sort_by(|a, b| a.study_id.cmp(&b.study_id));
        es.sort_by(|a, b| a.study_id.cmp(&b.study_id));
        for x in &xs {
            for e in &es {
                let gap = (x.study_date - e.study_date).abs();
                if gap <= max_gap_days {
                    pairs.push(MatchedPair {
                        subject_id: subject.to_string(),
                        xray: (*x).clone(),
                        ecg: (*e).clone(),
                        gap_days: gap,
                    });
                }
            }
        }
    }
    Ok(pairs)
}
