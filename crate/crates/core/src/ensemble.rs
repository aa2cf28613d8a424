//! Combining two models' predictions: fine-grained probability averaging
//! or coarse locality routing, plus thresholding into binary decisions.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Biomarker, Locality, NUM_BIOMARKERS};
use crate::error::{Error, Result};

/// Aggregated probabilities per (image, biomarker), with optional
/// thresholded decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub image_ids: Vec<String>,
    /// One row per image id, same order.
    pub probabilities: Vec<[f64; NUM_BIOMARKERS]>,
    pub decisions: Option<Vec<[bool; NUM_BIOMARKERS]>>,
    /// Threshold used to produce `decisions`.
    pub threshold: Option<f64>,
    /// Free-form provenance.
    pub source: String,
}

impl PredictionMatrix {
    pub fn new(
        image_ids: Vec<String>,
        probabilities: Vec<[f64; NUM_BIOMARKERS]>,
        source: impl Into<String>,
    ) -> Result<PredictionMatrix> {
        let pm = PredictionMatrix {
            image_ids,
            probabilities,
            decisions: None,
            threshold: None,
            source: source.into(),
        };
        pm.check_invariants()?;
        Ok(pm)
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.image_ids.len() != self.probabilities.len() {
            return Err(Error::contract(format!(
                "{} image ids vs {} probability rows",
                self.image_ids.len(),
                self.probabilities.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &self.image_ids {
            if !seen.insert(id) {
                return Err(Error::contract(format!("duplicate image_id {id:?}")));
            }
        }
        for (i, row) in self.probabilities.iter().enumerate() {
            for p in row {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::contract(format!(
                        "probability {p} out of [0,1] at row {i}"
                    )));
                }
            }
        }
        if let Some(decisions) = &self.decisions {
            if decisions.len() != self.image_ids.len() {
                return Err(Error::contract("decision row count mismatch"));
            }
            let threshold = self.threshold.ok_or_else(|| {
                Error::contract("decisions present without a recorded threshold")
            })?;
            for (drow, prow) in decisions.iter().zip(self.probabilities.iter()) {
                for (d, p) in drow.iter().zip(prow.iter()) {
                    if *d != (*p >= threshold) {
                        return Err(Error::contract(format!(
                            "decision bit disagrees with threshold {threshold} at p={p}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Row index of each image id in `other`, failing with the symmetric
    /// difference when the id sets differ.
    fn alignment(&self, other: &PredictionMatrix) -> Result<Vec<usize>> {
        let mine: BTreeSet<&str> = self.image_ids.iter().map(|s| s.as_str()).collect();
        let theirs: BTreeSet<&str> = other.image_ids.iter().map(|s| s.as_str()).collect();
        if mine != theirs {
            let only_mine: Vec<&&str> = mine.difference(&theirs).collect();
            let only_theirs: Vec<&&str> = theirs.difference(&mine).collect();
            return Err(Error::contract(format!(
                "image_id mismatch: {only_mine:?} only in first, {only_theirs:?} only in second"
            )));
        }
        let index: std::collections::BTreeMap<&str, usize> = other
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        Ok(self.image_ids.iter().map(|id| index[id.as_str()]).collect())
    }
}

/// Which model supplies a routed biomarker column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteSource {
    ModelA,
    ModelB,
}

/// Per-biomarker column routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub sources: [RouteSource; NUM_BIOMARKERS],
}

impl Default for RoutingTable {
    /// LOCAL and INTERMEDIATE columns come from the local-attention model
    /// (A); GLOBAL columns from the global-attention model (B).
    fn default() -> RoutingTable {
        let mut sources = [RouteSource::ModelA; NUM_BIOMARKERS];
        for bm in Biomarker::all() {
            sources[bm.index()] = match bm.locality() {
                Locality::Local | Locality::Intermediate => RouteSource::ModelA,
                Locality::Global => RouteSource::ModelB,
            };
        }
        RoutingTable { sources }
    }
}

/// Elementwise weighted average: weight_a * a + (1 - weight_a) * b.
pub fn average_ensemble(
    a: &PredictionMatrix,
    b: &PredictionMatrix,
    weight_a: f64,
) -> Result<PredictionMatrix> {
    if !(0.0..=1.0).contains(&weight_a) {
        return Err(Error::contract(format!("weight_a {weight_a} outside [0,1]")));
    }
    let align = a.alignment(b)?;
    let probabilities: Vec<[f64; NUM_BIOMARKERS]> = a
        .probabilities
        .iter()
        .zip(align.iter())
        .map(|(pa, &bi)| {
            let pb = &b.probabilities[bi];
            std::array::from_fn(|k| weight_a * pa[k] + (1.0 - weight_a) * pb[k])
        })
        .collect();
    PredictionMatrix::new(
        a.image_ids.clone(),
        probabilities,
        format!("average(w={weight_a}; {}; {})", a.source, b.source),
    )
}

/// Copy each biomarker column wholesale from its routed source.
pub fn route_ensemble(
    a: &PredictionMatrix,
    b: &PredictionMatrix,
    routing: &RoutingTable,
) -> Result<PredictionMatrix> {
    let align = a.alignment(b)?;
    let probabilities: Vec<[f64; NUM_BIOMARKERS]> = a
        .probabilities
        .iter()
        .zip(align.iter())
        .map(|(pa, &bi)| {
            let pb = &b.probabilities[bi];
            std::array::from_fn(|k| match routing.sources[k] {
                RouteSource::ModelA => pa[k],
                RouteSource::ModelB => pb[k],
            })
        })
        .collect();
    PredictionMatrix::new(
        a.image_ids.clone(),
        probabilities,
        format!("route({}; {})", a.source, b.source),
    )
}

/// Threshold probabilities into decisions; p >= threshold counts positive.
pub fn binarize(p: &PredictionMatrix, threshold: f64) -> Result<PredictionMatrix> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!(
            "threshold {threshold} outside (0,1)"
        )));
    }
    let decisions: Vec<[bool; NUM_BIOMARKERS]> = p
        .probabilities
        .iter()
        .map(|row| std::array::from_fn(|k| row[k] >= threshold))
        .collect();
    let mut out = p.clone();
    out.decisions = Some(decisions);
    out.threshold = Some(threshold);
    out.check_invariants()?;
    Ok(out)
}

pub const PREDICTIONS_HEADER: &str = "image_id,IRHRF,PAVF,FAVF,IRF,DRT_DME,VD";

fn check_csv_safe(id: &str) -> Result<()> {
    if id.contains(',') || id.contains('\n') || id.contains('\r') {
        return Err(Error::contract(format!(
            "image_id {id:?} contains CSV delimiter characters"
        )));
    }
    Ok(())
}

/// Write probabilities as CSV with six decimal places.
pub fn write_predictions_csv(pm: &PredictionMatrix, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{PREDICTIONS_HEADER}").map_err(|e| Error::io(path, e))?;
    for (id, row) in pm.image_ids.iter().zip(pm.probabilities.iter()) {
        check_csv_safe(id)?;
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
        writeln!(f, "{id},{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write decisions (0/1 bits) as CSV next to a probability file.
pub fn write_decisions_csv(pm: &PredictionMatrix, path: &Path) -> Result<()> {
    let decisions = pm
        .decisions
        .as_ref()
        .ok_or_else(|| Error::contract("no decisions to write"))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{PREDICTIONS_HEADER}").map_err(|e| Error::io(path, e))?;
    for (id, row) in pm.image_ids.iter().zip(decisions.iter()) {
        check_csv_safe(id)?;
        let cells: Vec<String> = row.iter().map(|d| if *d { "1" } else { "0" }.to_string()).collect();
        writeln!(f, "{id},{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read a probability CSV produced by `write_predictions_csv`.
pub fn read_predictions_csv(path: &Path) -> Result<PredictionMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PREDICTIONS_HEADER => {}
        other => {
            return Err(Error::contract(format!(
                "bad predictions header {other:?} in {}",
                path.display()
            )))
        }
    }
    let mut image_ids = Vec::new();
    let mut probabilities = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 1 + NUM_BIOMARKERS {
            return Err(Error::contract(format!(
                "line {}: expected {} fields, got {}",
                i + 2,
                1 + NUM_BIOMARKERS,
                parts.len()
            )));
        }
        image_ids.push(parts[0].to_string());
        let mut row = [0.0; NUM_BIOMARKERS];
        for (k, cell) in parts[1..].iter().enumerate() {
            row[k] = cell.parse().map_err(|_| {
                Error::contract(format!("line {}: bad probability {cell:?}", i + 2))
            })?;
        }
        probabilities.push(row);
    }
    PredictionMatrix::new(image_ids, probabilities, path.display().to_string())
}

/// Sidecar metadata describing how a prediction file was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub source: String,
    pub threshold: Option<f64>,
    pub config_digest: Option<String>,
}

pub fn write_prediction_meta(pm: &PredictionMatrix, config_digest: Option<String>, path: &Path) -> Result<()> {
    let meta = PredictionMeta {
        source: pm.source.clone(),
        threshold: pm.threshold,
        config_digest,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(ids: &[&str], rows: Vec<[f64; 6]>) -> PredictionMatrix {
        PredictionMatrix::new(
            ids.iter().map(|s| s.to_string()).collect(),
            rows,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn average_is_idempotent_on_equal_inputs() {
        let a = pm(&["x", "y"], vec![[0.2; 6], [0.8; 6]]);
        let out = average_ensemble(&a, &a, 0.5).unwrap();
        assert_eq!(out.probabilities, a.probabilities);
    }

    #[test]
    fn average_midpoint() {
        let a = pm(&["x"], vec![[0.2; 6]]);
        let b = pm(&["x"], vec![[0.8; 6]]);
        let out = average_ensemble(&a, &b, 0.5).unwrap();
        for p in &out.probabilities[0] {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_one_returns_first_exactly() {
        let a = pm(&["x"], vec![[0.3, 0.1, 0.9, 0.4, 0.6, 0.2]]);
        let b = pm(&["x"], vec![[0.8; 6]]);
        let out = average_ensemble(&a, &b, 1.0).unwrap();
        assert_eq!(out.probabilities, a.probabilities);
    }

    #[test]
    fn average_aligns_rows_by_id() {
        let a = pm(&["x", "y"], vec![[0.0; 6], [1.0; 6]]);
        let b = pm(&["y", "x"], vec![[1.0; 6], [0.0; 6]]);
        let out = average_ensemble(&a, &b, 0.5).unwrap();
        assert_eq!(out.probabilities[0], [0.0; 6]);
        assert_eq!(out.probabilities[1], [1.0; 6]);
    }

    #[test]
    fn mismatched_ids_report_symmetric_difference() {
        let a = pm(&["x", "y"], vec![[0.0; 6], [0.0; 6]]);
        let b = pm(&["x", "z"], vec![[0.0; 6], [0.0; 6]]);
        let err = average_ensemble(&a, &b, 0.5).unwrap_err().to_string();
        assert!(err.contains("\"y\"") && err.contains("\"z\""), "{err}");
    }

    #[test]
    fn default_routing_follows_locality() {
        let t = RoutingTable::default();
        assert_eq!(t.sources[0], RouteSource::ModelA); // IRHRF local
        assert_eq!(t.sources[1], RouteSource::ModelB); // PAVF global
        assert_eq!(t.sources[2], RouteSource::ModelB); // FAVF global
        assert_eq!(t.sources[3], RouteSource::ModelA); // IRF local
        assert_eq!(t.sources[4], RouteSource::ModelA); // DRT_DME intermediate
        assert_eq!(t.sources[5], RouteSource::ModelB); // VD global
    }

    #[test]
    fn routed_columns_are_bit_identical() {
        let a = pm(&["x"], vec![[0.11, 0.12, 0.13, 0.14, 0.15, 0.16]]);
        let b = pm(&["x"], vec![[0.91, 0.92, 0.93, 0.94, 0.95, 0.96]]);
        let out = route_ensemble(&a, &b, &RoutingTable::default()).unwrap();
        assert_eq!(out.probabilities[0], [0.11, 0.92, 0.93, 0.14, 0.15, 0.96]);

        let all_a = RoutingTable {
            sources: [RouteSource::ModelA; 6],
        };
        let out = route_ensemble(&a, &b, &all_a).unwrap();
        assert_eq!(out.probabilities, a.probabilities);
    }

    #[test]
    fn binarize_tie_counts_positive() {
        let p = pm(&["x"], vec![[0.5, 0.0, 1.0, 0.4999, 0.5001, 0.2]]);
        let out = binarize(&p, 0.5).unwrap();
        assert_eq!(
            out.decisions.unwrap()[0],
            [true, false, true, false, true, false]
        );
    }

    #[test]
    fn binarize_is_idempotent() {
        let p = pm(&["x", "y"], vec![[0.2; 6], [0.7; 6]]);
        let once = binarize(&p, 0.5).unwrap();
        let twice = binarize(&once, 0.5).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let p = pm(
            &["a", "b"],
            vec![[0.123456, 0.9, 0.0, 1.0, 0.5, 0.25], [0.1; 6]],
        );
        write_predictions_csv(&p, &path).unwrap();
        let back = read_predictions_csv(&path).unwrap();
        assert_eq!(back.image_ids, p.image_ids);
        for (ra, rb) in back.probabilities.iter().zip(p.probabilities.iter()) {
            for (a, b) in ra.iter().zip(rb.iter()) {
                assert!((a - b).abs() < 5e-7);
            }
        }
    }

    #[test]
    fn monotonicity_of_average() {
        let a = pm(&["x"], vec![[0.3; 6]]);
        let b = pm(&["x"], vec![[0.6; 6]]);
        let base = average_ensemble(&a, &b, 0.25).unwrap();
        let mut raised_rows = a.probabilities.clone();
        raised_rows[0][2] = 0.9;
        let raised = pm(&["x"], raised_rows);
        let out = average_ensemble(&raised, &b, 0.25).unwrap();
        for k in 0..6 {
            assert!(out.probabilities[0][k] >= base.probabilities[0][k]);
        }
    }
}
