//! Dataset model: the six-biomarker registry, image records, manifest
//! ingestion, validation, and a synthetic fixture generator that plants
//! locality-consistent features so the local/global taxonomy is
//! mechanically true at desk scale.

mod fixture;
mod images;
mod manifest;

pub use fixture::{generate_fixture, FixtureConfig};
pub use images::{read_gray_image, write_gray_image};
pub use manifest::{load_manifest, write_manifest};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BIOMARKERS: usize = 6;

/// Spatial extent of a biomarker, driving ensemble routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Locality {
    Local,
    Global,
    Intermediate,
}

impl Locality {
    /// Table abbreviation: L, G, or L/G.
    pub fn short(self) -> &'static str {
        match self {
            Locality::Local => "L",
            Locality::Global => "G",
            Locality::Intermediate => "L/G",
        }
    }
}

/// The six OCT biomarkers, in canonical label-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Biomarker {
    /// Intraretinal hyperreflective foci.
    Irhrf,
    /// Partially attached vitreous face.
    Pavf,
    /// Fully attached vitreous face.
    Favf,
    /// Intraretinal fluid.
    Irf,
    /// Diffuse retinal thickening / diabetic macular edema.
    DrtDme,
    /// Vitreous debris.
    Vd,
}

impl Biomarker {
    pub fn all() -> [Biomarker; NUM_BIOMARKERS] {
        [
            Biomarker::Irhrf,
            Biomarker::Pavf,
            Biomarker::Favf,
            Biomarker::Irf,
            Biomarker::DrtDme,
            Biomarker::Vd,
        ]
    }

    pub fn index(self) -> usize {
        match self {
            Biomarker::Irhrf => 0,
            Biomarker::Pavf => 1,
            Biomarker::Favf => 2,
            Biomarker::Irf => 3,
            Biomarker::DrtDme => 4,
            Biomarker::Vd => 5,
        }
    }

    pub fn from_index(index: usize) -> Option<Biomarker> {
        Biomarker::all().get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Biomarker::Irhrf => "IRHRF",
            Biomarker::Pavf => "PAVF",
            Biomarker::Favf => "FAVF",
            Biomarker::Irf => "IRF",
            Biomarker::DrtDme => "DRT_DME",
            Biomarker::Vd => "VD",
        }
    }

    pub fn locality(self) -> Locality {
        match self {
            Biomarker::Irhrf | Biomarker::Irf => Locality::Local,
            Biomarker::Pavf | Biomarker::Favf | Biomarker::Vd => Locality::Global,
            Biomarker::DrtDme => Locality::Intermediate,
        }
    }
}

/// A single biomarker label value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Zero,
    One,
    Unknown,
}

impl Label {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Label::Zero => Some(false),
            Label::One => Some(true),
            Label::Unknown => None,
        }
    }

    pub fn from_bit(bit: bool) -> Label {
        if bit {
            Label::One
        } else {
            Label::Zero
        }
    }
}

/// One OCT B-scan with identity, visit week, and its label vector.
///
/// `image_path` is stored as written in the manifest, relative to the
/// dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub week: u32,
    pub image_path: String,
    pub labels: Vec<Label>,
    pub clinical: Option<[f64; 2]>,
}

impl ImageRecord {
    /// Label vector as bits; `None` if any entry is UNKNOWN or the
    /// vector is malformed.
    pub fn label_bits(&self) -> Option<[bool; NUM_BIOMARKERS]> {
        if self.labels.len() != NUM_BIOMARKERS {
            return None;
        }
        let mut bits = [false; NUM_BIOMARKERS];
        for (i, l) in self.labels.iter().enumerate() {
            bits[i] = l.as_bool()?;
        }
        Some(bits)
    }
}

/// Which evaluation population a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    TestPhase1,
    TestPhase2,
}

/// An ordered collection of records sharing a root directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub split_tag: SplitTag,
    /// Directory that `image_path` values are relative to.
    pub root: PathBuf,
    /// True when UNKNOWN labels are permitted (ingestion of unlabeled pools).
    pub unlabeled: bool,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>, split_tag: SplitTag, root: PathBuf) -> Dataset {
        let unlabeled = records
            .iter()
            .any(|r| r.labels.iter().any(|l| *l == Label::Unknown));
        Dataset {
            records,
            split_tag,
            root,
            unlabeled,
        }
    }

    /// Distinct patient ids appearing in the records.
    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolved_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Map patient id to its single visit week, when unambiguous.
    pub fn week_of_patients(&self) -> BTreeMap<String, Option<u32>> {
        let mut weeks: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.records {
            weeks.entry(r.patient_id.clone()).or_default().insert(r.week);
        }
        weeks
            .into_iter()
            .map(|(pid, ws)| {
                let week = if ws.len() == 1 { ws.into_iter().next() } else { None };
                (pid, week)
            })
            .collect()
    }

    /// Truth matrix for fully labeled datasets.
    pub fn truth_matrix(&self) -> Result<Vec<[bool; NUM_BIOMARKERS]>> {
        self.records
            .iter()
            .map(|r| {
                r.label_bits().ok_or_else(|| {
                    Error::contract(format!(
                        "record {} has UNKNOWN or malformed labels",
                        r.image_id
                    ))
                })
            })
            .collect()
    }
}

/// Check every dataset invariant; returns human-readable violations.
///
/// Violations are data, not errors: an empty list means the dataset is
/// well-formed.
pub fn validate_dataset(ds: &Dataset) -> Vec<String> {
    let mut violations = Vec::new();

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(&first) = seen.get(r.image_id.as_str()) {
            violations.push(format!(
                "duplicate image_id {:?} at records {} and {}",
                r.image_id, first, i
            ));
        } else {
            seen.insert(r.image_id.as_str(), i);
        }

        if r.labels.len() != NUM_BIOMARKERS {
            violations.push(format!(
                "record {} ({:?}): label vector has length {}, expected {}",
                i,
                r.image_id,
                r.labels.len(),
                NUM_BIOMARKERS
            ));
        }

        if !ds.unlabeled && r.labels.iter().any(|l| *l == Label::Unknown) {
            violations.push(format!(
                "record {} ({:?}): UNKNOWN label in a dataset not flagged unlabeled",
                i, r.image_id
            ));
        }
    }

    let missing: Vec<String> = ds
        .records
        .iter()
        .filter(|r| !ds.resolved_path(r).is_file())
        .map(|r| format!("{} -> {}", r.image_id, ds.resolved_path(r).display()))
        .collect();
    if !missing.is_empty() {
        violations.push(format!(
            "missing image files ({}): {}",
            missing.len(),
            missing.join(", ")
        ));
    }

    violations
}

/// Validate and convert violations into an error.
pub fn ensure_valid(ds: &Dataset) -> Result<()> {
    let violations = validate_dataset(ds);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(violations))
    }
}

/// SHA-256 hex digest of a file's bytes (manifest digests, test-set identity).
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_order_and_locality() {
        let all = Biomarker::all();
        assert_eq!(all.len(), 6);
        let codes: Vec<&str> = all.iter().map(|b| b.code()).collect();
        assert_eq!(codes, ["IRHRF", "PAVF", "FAVF", "IRF", "DRT_DME", "VD"]);
        assert_eq!(Biomarker::Irhrf.locality(), Locality::Local);
        assert_eq!(Biomarker::Irf.locality(), Locality::Local);
        assert_eq!(Biomarker::Pavf.locality(), Locality::Global);
        assert_eq!(Biomarker::Favf.locality(), Locality::Global);
        assert_eq!(Biomarker::Vd.locality(), Locality::Global);
        assert_eq!(Biomarker::DrtDme.locality(), Locality::Intermediate);
        for (i, b) in all.iter().enumerate() {
            assert_eq!(b.index(), i);
            assert_eq!(Biomarker::from_index(i), Some(*b));
        }
    }

    fn record(id: &str, patient: &str, labels: Vec<Label>) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            patient_id: patient.to_string(),
            week: 0,
            image_path: format!("{id}.png"),
            labels,
            clinical: None,
        }
    }

    #[test]
    fn validation_flags_short_label_vector() {
        let dir = tempfile::tempdir().unwrap();
        let r = record("a", "p0", vec![Label::Zero; 5]);
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let ds = Dataset::new(vec![r], SplitTag::Train, dir.path().to_path_buf());
        let violations = validate_dataset(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("length 5"));
    }

    #[test]
    fn validation_flags_duplicate_ids_with_both_indices() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let r0 = record("a", "p0", vec![Label::Zero; 6]);
        let r1 = record("a", "p1", vec![Label::One; 6]);
        let ds = Dataset::new(vec![r0, r1], SplitTag::Train, dir.path().to_path_buf());
        let violations = validate_dataset(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("records 0 and 1"), "{}", violations[0]);
    }

    #[test]
    fn validation_lists_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        let r = record("a", "p0", vec![Label::Zero; 6]);
        let ds = Dataset::new(vec![r], SplitTag::Train, dir.path().to_path_buf());
        let violations = validate_dataset(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("missing image files (1)"));
        assert!(violations[0].contains("a.png"));
    }

    #[test]
    fn unknown_only_allowed_when_flagged() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let r = record("a", "p0", vec![Label::Unknown; 6]);
        // Dataset::new derives the unlabeled flag from the records.
        let ds = Dataset::new(vec![r.clone()], SplitTag::Train, dir.path().to_path_buf());
        assert!(ds.unlabeled);
        assert!(validate_dataset(&ds).is_empty());

        let mut forced = ds.clone();
        forced.unlabeled = false;
        let violations = validate_dataset(&forced);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("UNKNOWN"));
    }

    #[test]
    fn patients_derived_from_records() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c"] {
            std::fs::write(dir.path().join(format!("{id}.png")), b"").unwrap();
        }
        let ds = Dataset::new(
            vec![
                record("a", "p0", vec![Label::Zero; 6]),
                record("b", "p1", vec![Label::Zero; 6]),
                record("c", "p0", vec![Label::Zero; 6]),
            ],
            SplitTag::Train,
            dir.path().to_path_buf(),
        );
        let patients = ds.patients();
        assert_eq!(patients.len(), 2);
        assert!(patients.contains("p0") && patients.contains("p1"));
    }
}
