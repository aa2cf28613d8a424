//! Manifest ingestion and emission.
//!
//! A manifest is UTF-8 with one JSON object per line:
//! `{"image_id": ..., "patient_id": ..., "week": ..., "image_path": ...,
//!   "labels": [0,1,...] | null, "clinical": [a,b] | null}`.
//! Label elements may individually be null for UNKNOWN; paths are relative
//! to the manifest's directory.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_valid, Dataset, ImageRecord, Label, SplitTag, NUM_BIOMARKERS};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image_id: String,
    patient_id: String,
    week: u32,
    image_path: String,
    labels: Option<Vec<Option<u8>>>,
    clinical: Option<[f64; 2]>,
}

impl ManifestRow {
    fn into_record(self, path: &Path, line: usize) -> Result<ImageRecord> {
        let labels = match self.labels {
            None => vec![Label::Unknown; NUM_BIOMARKERS],
            Some(values) => values
                .into_iter()
                .map(|v| match v {
                    None => Ok(Label::Unknown),
                    Some(0) => Ok(Label::Zero),
                    Some(1) => Ok(Label::One),
                    Some(other) => Err(Error::ManifestParse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("label value {other} not in {{0, 1, null}}"),
                    }),
                })
                .collect::<Result<Vec<Label>>>()?,
        };
        Ok(ImageRecord {
            image_id: self.image_id,
            patient_id: self.patient_id,
            week: self.week,
            image_path: self.image_path,
            labels,
            clinical: self.clinical,
        })
    }

    fn from_record(record: &ImageRecord) -> ManifestRow {
        let all_unknown = !record.labels.is_empty()
            && record.labels.iter().all(|l| *l == Label::Unknown);
        let labels = if all_unknown {
            None
        } else {
            Some(
                record
                    .labels
                    .iter()
                    .map(|l| match l {
                        Label::Zero => Some(0),
                        Label::One => Some(1),
                        Label::Unknown => None,
                    })
                    .collect(),
            )
        };
        ManifestRow {
            image_id: record.image_id.clone(),
            patient_id: record.patient_id.clone(),
            week: record.week,
            image_path: record.image_path.clone(),
            labels,
            clinical: record.clinical,
        }
    }
}

/// Load a manifest, preserving record order, and validate the result.
///
/// The dataset root is the manifest's parent directory.
pub fn load_manifest(path: &Path, split_tag: SplitTag) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ".".into());

    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(line).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: line_no,
                msg: e.to_string(),
            })?;
        records.push(row.into_record(path, line_no)?);
    }

    let ds = Dataset::new(records, split_tag, root);
    ensure_valid(&ds)?;
    Ok(ds)
}

/// Write a dataset's records as a manifest, one JSON object per line.
pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in &ds.records {
        let row = ManifestRow::from_record(record);
        let line = serde_json::to_string(&row).expect("manifest row serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::write(path, b"png").unwrap();
    }

    #[test]
    fn loads_three_records_two_patients() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c"] {
            touch(&dir.path().join(format!("{id}.png")));
        }
        let manifest = dir.path().join("manifest.jsonl");
        std::fs::write(
            &manifest,
            concat!(
                "{\"image_id\":\"a\",\"patient_id\":\"p0\",\"week\":0,\"image_path\":\"a.png\",\"labels\":[0,0,1,0,1,0],\"clinical\":null}\n",
                "{\"image_id\":\"b\",\"patient_id\":\"p0\",\"week\":4,\"image_path\":\"b.png\",\"labels\":[1,0,0,0,0,0],\"clinical\":[0.5,1.0]}\n",
                "{\"image_id\":\"c\",\"patient_id\":\"p1\",\"week\":0,\"image_path\":\"c.png\",\"labels\":[0,1,0,1,0,1],\"clinical\":null}\n",
            ),
        )
        .unwrap();
        let ds = load_manifest(&manifest, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.patients().len(), 2);
        assert_eq!(ds.records[1].clinical, Some([0.5, 1.0]));
    }

    #[test]
    fn duplicate_image_id_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("a.png"));
        let manifest = dir.path().join("manifest.jsonl");
        let row = "{\"image_id\":\"a\",\"patient_id\":\"p0\",\"week\":0,\"image_path\":\"a.png\",\"labels\":[0,0,0,0,0,0],\"clinical\":null}\n";
        std::fs::write(&manifest, format!("{row}{row}")).unwrap();
        let err = load_manifest(&manifest, SplitTag::Train).unwrap_err();
        match err {
            Error::Validation(violations) => {
                assert!(violations.iter().any(|v| v.contains("\"a\"")), "{violations:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        std::fs::write(&manifest, "{\"image_id\": \"a\"\n").unwrap();
        let err = load_manifest(&manifest, SplitTag::Train).unwrap_err();
        match err {
            Error::ManifestParse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_lists_all_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        std::fs::write(
            &manifest,
            concat!(
                "{\"image_id\":\"a\",\"patient_id\":\"p0\",\"week\":0,\"image_path\":\"a.png\",\"labels\":[0,0,0,0,0,0],\"clinical\":null}\n",
                "{\"image_id\":\"b\",\"patient_id\":\"p0\",\"week\":0,\"image_path\":\"b.png\",\"labels\":[0,0,0,0,0,0],\"clinical\":null}\n",
            ),
        )
        .unwrap();
        let err = load_manifest(&manifest, SplitTag::Train).unwrap_err();
        match err {
            Error::Validation(violations) => {
                let joined = violations.join("\n");
                assert!(joined.contains("a.png") && joined.contains("b.png"), "{joined}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn null_labels_parse_as_unknown() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("a.png"));
        let manifest = dir.path().join("manifest.jsonl");
        std::fs::write(
            &manifest,
            "{\"image_id\":\"a\",\"patient_id\":\"p0\",\"week\":0,\"image_path\":\"a.png\",\"labels\":null,\"clinical\":null}\n",
        )
        .unwrap();
        let ds = load_manifest(&manifest, SplitTag::Train).unwrap();
        assert!(ds.unlabeled);
        assert_eq!(ds.records[0].labels, vec![Label::Unknown; 6]);
    }
}
