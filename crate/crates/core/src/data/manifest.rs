//! UTF-8 TSV manifest tying studies, payload paths, notes and labels
//! together. Columns: subject_id, study_id_x, study_id_e, image_path,
//! ecg_path, xray_note, ecg_note, labels (`name:value;...`), gap_days.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{io_err, DataError, DataResult, LabelVector};

pub const MANIFEST_COLUMNS: [&str; 9] = [
    "subject_id",
    "study_id_x",
    "study_id_e",
    "image_path",
    "ecg_path",
    "xray_note",
    "ecg_note",
    "labels",
    "gap_days",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub study_id_x: String,
    pub study_id_e: String,
    pub image_path: String,
    pub ecg_path: String,
    pub xray_note: String,
    pub ecg_note: String,
    pub labels: LabelVector,
    pub gap_days: i64,
}

fn check_field(name: &str, value: &str) -> DataResult<()> {
    if value.contains('\t') || value.contains('\n') || value.contains('\r') {
        return Err(DataError::Invalid(format!(
            "manifest field {name} contains a tab or newline"
        )));
    }
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> DataResult<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    writeln!(f, "{}", MANIFEST_COLUMNS.join("\t")).map_err(|e| io_err(path, e))?;
    for row in rows {
        let labels = row.labels.encode();
        let fields = [
            ("subject_id", row.subject_id.as_str()),
            ("study_id_x", row.study_id_x.as_str()),
            ("study_id_e", row.study_id_e.as_str()),
            ("image_path", row.image_path.as_str()),
            ("ecg_path", row.ecg_path.as_str()),
            ("xray_note", row.xray_note.as_str()),
            ("ecg_note", row.ecg_note.as_str()),
            ("labels", labels.as_str()),
        ];
        for (name, value) in fields {
            check_field(name, value)?;
        }
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.subject_id,
            row.study_id_x,
            row.study_id_e,
            row.image_path,
            row.ecg_path,
            row.xray_note,
            row.ecg_note,
            labels,
            row.gap_days
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> DataResult<Vec<ManifestRow>> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if lineno == 0 {
            let got: Vec<&str> = line.split('\t').collect();
            if got != MANIFEST_COLUMNS {
                return Err(DataError::Manifest {
                    line: 1,
                    msg: format!("unexpected header {got:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != MANIFEST_COLUMNS.len() {
            return Err(DataError::Manifest {
                line: lineno + 1,
                msg: format!("{} fields, expected {}", fields.len(), MANIFEST_COLUMNS.len()),
            });
        }
        rows.push(ManifestRow {
            subject_id: fields[0].to_string(),
            study_id_x: fields[1].to_string(),
            study_id_e: fields[2].to_string(),
            image_path: fields[3].to_string(),
            ecg_path: fields[4].to_string(),
            xray_note: fields[5].to_string(),
            ecg_note: fields[6].to_string(),
            labels: LabelVector::decode(fields[7]).map_err(|e| DataError::Manifest {
                line: lineno + 1,
                msg: e.to_string(),
            })?,
            gap_days: fields[8].parse().map_err(|_| DataError::Manifest {
                line: lineno + 1,
                msg: format!("bad gap_days {:?}", fields[8]),
            })?,
        });
    }
    Ok(rows)
}
