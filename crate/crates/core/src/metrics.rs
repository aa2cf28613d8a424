//! Image-wise and patient-wise F1 evaluation.
//!
//! Two competition-style metrics are implemented: per-biomarker F1 pooled
//! over all images (with macro and micro aggregates), and patient-wise F1
//! where confusion counts are pooled within each patient and the resulting
//! scores are averaged unweighted across patients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Biomarker, NUM_BIOMARKERS};
use crate::error::{Error, Result};

/// Binary confusion counts for one pooled scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, decision: bool, truth: bool) {
        match (decision, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// What to report when a pooled scope has no positives anywhere
/// (tp = fp = fn = 0, so F1 is 0/0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZeroDivisionPolicy {
    /// Perfect agreement on an all-negative scope scores 1.0.
    One,
    /// Degenerate scopes score 0.0.
    Zero,
}

/// F1 = 2tp / (2tp + fp + fn), with the degenerate 0/0 case resolved
/// by `policy`.
pub fn f1_from_counts(c: ConfusionCounts, policy: ZeroDivisionPolicy) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return match policy {
            ZeroDivisionPolicy::One => 1.0,
            ZeroDivisionPolicy::Zero => 0.0,
        };
    }
    2.0 * c.tp as f64 / denom as f64
}

fn check_shapes(decisions: &[[bool; NUM_BIOMARKERS]], truth: &[[bool; NUM_BIOMARKERS]]) -> Result<()> {
    if decisions.len() != truth.len() {
        return Err(Error::contract(format!(
            "decision/truth row mismatch: {} vs {}",
            decisions.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Per-biomarker confusion counts pooled over all rows.
pub fn per_biomarker_counts(
    decisions: &[[bool; NUM_BIOMARKERS]],
    truth: &[[bool; NUM_BIOMARKERS]],
) -> Result<[ConfusionCounts; NUM_BIOMARKERS]> {
    check_shapes(decisions, truth)?;
    let mut counts = [ConfusionCounts::default(); NUM_BIOMARKERS];
    for (d_row, t_row) in decisions.iter().zip(truth.iter()) {
        for b in 0..NUM_BIOMARKERS {
            counts[b].add(d_row[b], t_row[b]);
        }
    }
    Ok(counts)
}

/// Column-wise F1 pooled over all images.
pub fn per_biomarker_f1(
    decisions: &[[bool; NUM_BIOMARKERS]],
    truth: &[[bool; NUM_BIOMARKERS]],
    policy: ZeroDivisionPolicy,
) -> Result<[f64; NUM_BIOMARKERS]> {
    let counts = per_biomarker_counts(decisions, truth)?;
    Ok(counts.map(|c| f1_from_counts(c, policy)))
}

/// Arithmetic mean of the six per-biomarker F1 scores.
pub fn macro_f1(per_biomarker: &[f64; NUM_BIOMARKERS]) -> f64 {
    per_biomarker.iter().sum::<f64>() / NUM_BIOMARKERS as f64
}

/// F1 over all (image, biomarker) pairs pooled into one confusion table.
pub fn micro_f1(
    decisions: &[[bool; NUM_BIOMARKERS]],
    truth: &[[bool; NUM_BIOMARKERS]],
    policy: ZeroDivisionPolicy,
) -> Result<f64> {
    check_shapes(decisions, truth)?;
    let mut c = ConfusionCounts::default();
    for (d_row, t_row) in decisions.iter().zip(truth.iter()) {
        for b in 0..NUM_BIOMARKERS {
            c.add(d_row[b], t_row[b]);
        }
    }
    Ok(f1_from_counts(c, policy))
}

/// Per-patient F1 plus the unweighted mean across patients.
///
/// Confusion counts are pooled over each patient's (image, biomarker)
/// pairs, which stays well-defined down to one image per patient.
pub fn patient_wise_f1(
    decisions: &[[bool; NUM_BIOMARKERS]],
    truth: &[[bool; NUM_BIOMARKERS]],
    patient_of: &[String],
    policy: ZeroDivisionPolicy,
) -> Result<(BTreeMap<String, PatientScore>, f64)> {
    check_shapes(decisions, truth)?;
    if patient_of.len() != decisions.len() {
        return Err(Error::contract(format!(
            "patient map covers {} images, decisions have {}",
            patient_of.len(),
            decisions.len()
        )));
    }
    let mut pooled: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut image_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (i, pid) in patient_of.iter().enumerate() {
        let c = pooled.entry(pid.clone()).or_default();
        for b in 0..NUM_BIOMARKERS {
            c.add(decisions[i][b], truth[i][b]);
        }
        *image_counts.entry(pid.clone()).or_default() += 1;
    }
    if pooled.is_empty() {
        return Err(Error::contract("patient-wise F1 over an empty dataset"));
    }
    let per_patient: BTreeMap<String, PatientScore> = pooled
        .into_iter()
        .map(|(pid, c)| {
            let f1 = f1_from_counts(c, policy);
            let n_images = image_counts[&pid];
            (pid, PatientScore { f1, n_images })
        })
        .collect();
    let mean = per_patient.values().map(|s| s.f1).sum::<f64>() / per_patient.len() as f64;
    Ok((per_patient, mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub f1: f64,
    pub n_images: usize,
}

/// Complete evaluation report for one prediction matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_biomarker_f1: [f64; NUM_BIOMARKERS],
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_patient: BTreeMap<String, PatientScore>,
    pub patient_wise_f1: f64,
    pub image_policy: ZeroDivisionPolicy,
    pub patient_policy: ZeroDivisionPolicy,
}

impl MetricsReport {
    /// Compute all report fields from aligned decision/truth matrices.
    pub fn compute(
        decisions: &[[bool; NUM_BIOMARKERS]],
        truth: &[[bool; NUM_BIOMARKERS]],
        patient_of: &[String],
        image_policy: ZeroDivisionPolicy,
        patient_policy: ZeroDivisionPolicy,
    ) -> Result<Self> {
        let per_biomarker = per_biomarker_f1(decisions, truth, image_policy)?;
        let macro_v = macro_f1(&per_biomarker);
        let micro_v = micro_f1(decisions, truth, image_policy)?;
        let (per_patient, patient_mean) =
            patient_wise_f1(decisions, truth, patient_of, patient_policy)?;
        Ok(MetricsReport {
            per_biomarker_f1: per_biomarker,
            macro_f1: macro_v,
            micro_f1: micro_v,
            per_patient,
            patient_wise_f1: patient_mean,
            image_policy,
            patient_policy,
        })
    }

    /// Re-assert the aggregate invariants (used after deserialization).
    pub fn check_invariants(&self) -> Result<()> {
        let macro_v = macro_f1(&self.per_biomarker_f1);
        if (macro_v - self.macro_f1).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "macro_f1 {} is not the mean of per-biomarker values {}",
                self.macro_f1, macro_v
            )));
        }
        if !self.per_patient.is_empty() {
            let mean =
                self.per_patient.values().map(|s| s.f1).sum::<f64>() / self.per_patient.len() as f64;
            if (mean - self.patient_wise_f1).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "patient_wise_f1 {} is not the mean of per-patient values {}",
                    self.patient_wise_f1, mean
                )));
            }
        }
        Ok(())
    }

    /// Render a single-column report in the biomarker/type/score table layout.
    pub fn render_table(&self, column_name: &str) -> String {
        render_f1_table(&[(column_name.to_string(), self.per_biomarker_f1)])
    }
}

/// Render one or more per-biomarker F1 columns as a text table with the
/// six biomarkers in registry order plus an Overall (macro) row.
pub fn render_f1_table(columns: &[(String, [f64; NUM_BIOMARKERS])]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:<6}", "Biomarker", "Type"));
    for (name, _) in columns {
        out.push_str(&format!(" {name:>12}"));
    }
    out.push('\n');
    for bm in Biomarker::all() {
        out.push_str(&format!("{:<10} {:<6}", bm.code(), bm.locality().short()));
        for (_, col) in columns {
            out.push_str(&format!(" {:>12.4}", col[bm.index()]));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<10} {:<6}", "Overall", ""));
    for (_, col) in columns {
        out.push_str(&format!(" {:>12.4}", macro_f1(col)));
    }
    out.push('\n');
    out
}

/// One row of the outlier report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub patient_id: String,
    /// Present when all of the patient's images share a single visit week.
    pub week: Option<u32>,
    pub f1: f64,
}

/// Patients scoring below `threshold`, ascending by F1.
///
/// `week_of` supplies each patient's visit week when it is unambiguous.
pub fn outlier_report(
    per_patient: &BTreeMap<String, PatientScore>,
    week_of: &BTreeMap<String, Option<u32>>,
    threshold: f64,
) -> Vec<Outlier> {
    let mut outliers: Vec<Outlier> = per_patient
        .iter()
        .filter(|(_, s)| s.f1 < threshold)
        .map(|(pid, s)| Outlier {
            patient_id: pid.clone(),
            week: week_of.get(pid).copied().flatten(),
            f1: s.f1,
        })
        .collect();
    // Stable sort: ascending F1, patient id breaking ties.
    outliers.sort_by(|a, b| {
        a.f1.partial_cmp(&b.f1)
            .unwrap()
            .then_with(|| a.patient_id.cmp(&b.patient_id))
    });
    outliers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn f1_hand_enumerated() {
        // 2tp/(2tp+fp+fn) = 2/(2+1+0) = 2/3
        let f1 = f1_from_counts(counts(1, 1, 0, 0), ZeroDivisionPolicy::Zero);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_perfect() {
        assert_eq!(f1_from_counts(counts(5, 0, 0, 0), ZeroDivisionPolicy::Zero), 1.0);
    }

    #[test]
    fn f1_degenerate_rule() {
        let c = counts(0, 0, 0, 10);
        assert_eq!(f1_from_counts(c, ZeroDivisionPolicy::One), 1.0);
        assert_eq!(f1_from_counts(c, ZeroDivisionPolicy::Zero), 0.0);
    }

    #[test]
    fn per_biomarker_single_column() {
        // tp=1, fp=1, fn=0 in column 0; other columns all-negative.
        let decisions = vec![
            [true, false, false, false, false, false],
            [true, false, false, false, false, false],
        ];
        let truth = vec![
            [true, false, false, false, false, false],
            [false, false, false, false, false, false],
        ];
        let f1 = per_biomarker_f1(&decisions, &truth, ZeroDivisionPolicy::Zero).unwrap();
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-12);
        for v in &f1[1..] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn identical_matrices_score_one() {
        let m = vec![
            [true, false, true, false, true, false],
            [false, true, false, true, false, true],
        ];
        let f1 = per_biomarker_f1(&m, &m, ZeroDivisionPolicy::One).unwrap();
        assert_eq!(f1, [1.0; NUM_BIOMARKERS]);
        assert_eq!(micro_f1(&m, &m, ZeroDivisionPolicy::One).unwrap(), 1.0);
        assert_eq!(macro_f1(&f1), 1.0);
    }

    #[test]
    fn row_permutation_invariance() {
        let decisions = vec![
            [true, false, false, true, false, false],
            [false, true, false, false, true, false],
            [true, true, true, false, false, true],
        ];
        let truth = vec![
            [true, true, false, false, false, false],
            [false, true, true, false, true, false],
            [false, true, true, false, false, true],
        ];
        let base = per_biomarker_f1(&decisions, &truth, ZeroDivisionPolicy::Zero).unwrap();
        let perm = [2usize, 0, 1];
        let d2: Vec<_> = perm.iter().map(|&i| decisions[i]).collect();
        let t2: Vec<_> = perm.iter().map(|&i| truth[i]).collect();
        let permuted = per_biomarker_f1(&d2, &t2, ZeroDivisionPolicy::Zero).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn patient_mean_is_unweighted() {
        // Patient a: perfect on 2 images. Patient b: f1 = 0.6 on 1 image.
        let decisions = vec![
            [true; NUM_BIOMARKERS],
            [true; NUM_BIOMARKERS],
            [true, true, true, false, false, false],
        ];
        let truth = vec![
            [true; NUM_BIOMARKERS],
            [true; NUM_BIOMARKERS],
            [true, false, false, true, true, false],
        ];
        // b: tp=1, fp=2, fn=2, tn=1 -> 2/(2+2+2) = 0.333...; a: 1.0
        let patients = vec!["a".to_string(), "a".to_string(), "b".to_string()];
        let (per_patient, mean) =
            patient_wise_f1(&decisions, &truth, &patients, ZeroDivisionPolicy::One).unwrap();
        assert_eq!(per_patient["a"].f1, 1.0);
        assert!((per_patient["b"].f1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((mean - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_negative_patient_scores_one_under_policy_one() {
        let decisions = vec![[false; NUM_BIOMARKERS]];
        let truth = vec![[false; NUM_BIOMARKERS]];
        let patients = vec!["p".to_string()];
        let (per_patient, mean) =
            patient_wise_f1(&decisions, &truth, &patients, ZeroDivisionPolicy::One).unwrap();
        assert_eq!(per_patient["p"].f1, 1.0);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn outliers_filtered_and_sorted() {
        let mut per_patient = BTreeMap::new();
        per_patient.insert("A".to_string(), PatientScore { f1: 0.37, n_images: 3 });
        per_patient.insert("B".to_string(), PatientScore { f1: 0.64, n_images: 2 });
        per_patient.insert("C".to_string(), PatientScore { f1: 0.9, n_images: 1 });
        let mut weeks = BTreeMap::new();
        weeks.insert("A".to_string(), Some(100));
        weeks.insert("B".to_string(), Some(40));
        weeks.insert("C".to_string(), None);
        let out = outlier_report(&per_patient, &weeks, 0.65);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].patient_id, "A");
        assert_eq!(out[0].week, Some(100));
        assert_eq!(out[1].patient_id, "B");
        assert_eq!(out[1].f1, 0.64);
    }

    #[test]
    fn outliers_empty_when_all_above_threshold() {
        let mut per_patient = BTreeMap::new();
        per_patient.insert("A".to_string(), PatientScore { f1: 1.0, n_images: 1 });
        let out = outlier_report(&per_patient, &BTreeMap::new(), 0.65);
        assert!(out.is_empty());
    }

    #[test]
    fn table_layout_has_biomarker_rows_and_overall() {
        let col = [0.774, 0.677, 0.868, 0.611, 0.615, 0.764];
        let table = render_f1_table(&[("ModelA".to_string(), col)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 8); // header + 6 biomarkers + overall
        assert!(lines[1].starts_with("IRHRF"));
        assert!(lines[6].starts_with("VD"));
        assert!(lines[7].starts_with("Overall"));
        assert!(lines[7].contains("0.7182"));
    }

    #[test]
    fn report_invariants_roundtrip() {
        let decisions = vec![
            [true, false, true, false, true, false],
            [false, true, false, true, false, true],
        ];
        let truth = vec![
            [true, false, false, false, true, false],
            [false, true, false, true, true, true],
        ];
        let patients = vec!["a".to_string(), "b".to_string()];
        let report = MetricsReport::compute(
            &decisions,
            &truth,
            &patients,
            ZeroDivisionPolicy::Zero,
            ZeroDivisionPolicy::One,
        )
        .unwrap();
        report.check_invariants().unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        back.check_invariants().unwrap();
        assert_eq!(back.macro_f1, report.macro_f1);
    }
}
