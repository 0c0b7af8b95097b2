//! Volumetric Dice and absolute volume difference over consensus voxels,
//! and per-experiment report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, Spacing, Vendor};
use crate::error::{Error, Result};

fn check_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!(
            "{what}: shapes differ ({a} vs {b} voxels)"
        )));
    }
    Ok(())
}

/// Counts `(|X|, |Y|, |X ∩ Y|)` for `class_id` over valid voxels.
fn overlap_counts(pred: &[u8], reference: &[u8], class_id: u8, valid: Option<&[bool]>) -> (u64, u64, u64) {
    let (mut x, mut y, mut both) = (0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let in_x = pred[i] == class_id;
        let in_y = reference[i] == class_id;
        x += u64::from(in_x);
        y += u64::from(in_y);
        both += u64::from(in_x && in_y);
    }
    (x, y, both)
}

/// `2|X∩Y| / (|X|+|Y|)`; `None` when both sets are empty.
pub fn dice_score(
    pred: &[u8],
    reference: &[u8],
    class_id: u8,
    valid: Option<&[bool]>,
) -> Result<Option<f64>> {
    check_same_len(pred.len(), reference.len(), "dice_score")?;
    if let Some(v) = valid {
        check_same_len(pred.len(), v.len(), "dice_score valid mask")?;
    }
    let (x, y, both) = overlap_counts(pred, reference, class_id, valid);
    if x + y == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (x + y) as f64))
}

/// `| |X| − |Y| | · voxel_volume` in mm³.
pub fn avd(
    pred: &[u8],
    reference: &[u8],
    class_id: u8,
    voxel_volume_mm3: f64,
    valid: Option<&[bool]>,
) -> Result<f64> {
    check_same_len(pred.len(), reference.len(), "avd")?;
    if let Some(v) = valid {
        check_same_len(pred.len(), v.len(), "avd valid mask")?;
    }
    if !(voxel_volume_mm3.is_finite() && voxel_volume_mm3 > 0.0) {
        return Err(Error::Validation(format!(
            "voxel volume must be positive, got {voxel_volume_mm3}"
        )));
    }
    let (x, y, _) = overlap_counts(pred, reference, class_id, valid);
    Ok(x.abs_diff(y) as f64 * voxel_volume_mm3)
}

/// Voxels where both annotations carry the same label, background included.
pub fn consensus_mask(a: &[u8], b: &[u8]) -> Result<Vec<bool>> {
    check_same_len(a.len(), b.len(), "consensus_mask")?;
    Ok(a.iter().zip(b).map(|(x, y)| x == y).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub volume_id: String,
    pub vendor: Vendor,
    pub class_id: u8,
    pub class_name: String,
    pub dice: Option<f64>,
    pub avd_mm3: f64,
}

/// Metrics for every class in `classes`.
///
/// With a second annotation, only voxels where both annotations agree are
/// scored, for the prediction and the reference alike.
pub fn evaluate_volume(
    pred: &LabelMask,
    ref_a: &LabelMask,
    ref_b: Option<&LabelMask>,
    spacing: Spacing,
    classes: &BTreeMap<u8, String>,
) -> Result<Vec<MetricsRecord>> {
    spacing.validate()?;
    if pred.shape != ref_a.shape {
        return Err(Error::Validation(format!(
            "prediction shape {:?} differs from reference {:?}",
            pred.shape.as_array(),
            ref_a.shape.as_array()
        )));
    }
    let valid = match ref_b {
        Some(b) => {
            if b.shape != ref_a.shape {
                return Err(Error::Validation("the two annotations differ in shape".into()));
            }
            Some(consensus_mask(&ref_a.labels, &b.labels)?)
        }
        None => None,
    };
    let voxel = spacing.voxel_volume_mm3();
    classes
        .iter()
        .map(|(&class_id, name)| {
            Ok(MetricsRecord {
                volume_id: ref_a.volume_id.clone(),
                vendor: ref_a.vendor,
                class_id,
                class_name: name.clone(),
                dice: dice_score(&pred.labels, &ref_a.labels, class_id, valid.as_deref())?,
                avd_mm3: avd(&pred.labels, &ref_a.labels, class_id, voxel, valid.as_deref())?,
            })
        })
        .collect()
}

/// A record tagged with the experiment that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_name: String,
    /// Mean over defined Dice values; `None` if none are defined.
    pub mean_dice: Option<f64>,
    pub mean_avd_mm3: f64,
    pub n_records: usize,
    pub n_dice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: String,
    /// In class-id order.
    pub classes: Vec<ClassSummary>,
}

impl ExperimentSummary {
    /// Mean of the per-class mean Dice values that are defined.
    pub fn mean_dice(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|c| c.mean_dice))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Experiments in order of first appearance.
    pub experiments: Vec<ExperimentSummary>,
    /// Per (experiment, vendor) breakdown.
    pub by_vendor: Vec<(String, Vendor, Vec<ClassSummary>)>,
    pub records: Vec<ExperimentRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize<'a>(records: impl Iterator<Item = &'a MetricsRecord> + Clone) -> Vec<ClassSummary> {
    let mut classes: BTreeMap<u8, String> = BTreeMap::new();
    for r in records.clone() {
        classes.entry(r.class_id).or_insert_with(|| r.class_name.clone());
    }
    classes
        .into_iter()
        .map(|(id, name)| {
            let rows: Vec<&MetricsRecord> = records.clone().filter(|r| r.class_id == id).collect();
            ClassSummary {
                class_name: name,
                mean_dice: mean(rows.iter().filter_map(|r| r.dice)),
                mean_avd_mm3: mean(rows.iter().map(|r| r.avd_mm3)).unwrap_or(0.0),
                n_records: rows.len(),
                n_dice: rows.iter().filter(|r| r.dice.is_some()).count(),
            }
        })
        .collect()
}

/// Means per (experiment, class), with undefined Dice values left out.
pub fn aggregate_report(records: &[ExperimentRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Validation("no records to aggregate".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.experiment.as_str()) {
            order.push(&r.experiment);
        }
    }
    let experiments = order
        .iter()
        .map(|&name| ExperimentSummary {
            experiment: name.to_string(),
            classes: summarize(
                records
                    .iter()
                    .filter(move |r| r.experiment == name)
                    .map(|r| &r.record),
            ),
        })
        .collect();
    let mut by_vendor = Vec::new();
    for &name in &order {
        let mut vendors: Vec<Vendor> = records
            .iter()
            .filter(|r| r.experiment == name)
            .map(|r| r.record.vendor)
            .collect();
        vendors.sort();
        vendors.dedup();
        for vendor in vendors {
            let rows = records
                .iter()
                .filter(move |r| r.experiment == name && r.record.vendor == vendor)
                .map(|r| &r.record);
            by_vendor.push((name.to_string(), vendor, summarize(rows)));
        }
    }
    Ok(Report {
        experiments,
        by_vendor,
        records: records.to_vec(),
    })
}

/// Marker appended to the best value of each column.
pub const BEST_MARK: char = '*';

impl Report {
    /// Class names across all experiments, in class-id order of first seen.
    fn class_columns(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in &self.experiments {
            for c in &e.classes {
                if !names.contains(&c.class_name) {
                    names.push(c.class_name.clone());
                }
            }
        }
        names
    }

    /// Index of the best experiment for each Dice column (highest) and AVD
    /// column (lowest).
    pub fn best_per_column(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let cols = self.class_columns();
        let lookup = |e: &ExperimentSummary, name: &str| {
            e.classes.iter().find(|c| c.class_name == name).cloned()
        };
        let best = |better: &dyn Fn(f64, f64) -> bool, get: &dyn Fn(&ClassSummary) -> Option<f64>| {
            cols.iter()
                .map(|name| {
                    let mut best: Option<(usize, f64)> = None;
                    for (i, e) in self.experiments.iter().enumerate() {
                        if let Some(v) = lookup(e, name).and_then(|c| get(&c)) {
                            if best.is_none_or(|(_, b)| better(v, b)) {
                                best = Some((i, v));
                            }
                        }
                    }
                    best.map(|(i, _)| i)
                })
                .collect::<Vec<_>>()
        };
        let dice = best(&|v, b| v > b, &|c| c.mean_dice);
        let avd = best(&|v, b| v < b, &|c| Some(c.mean_avd_mm3));
        (dice, avd)
    }

    /// Plain-text table: one row per experiment, Dice columns then AVD
    /// columns, best value per column suffixed with [`BEST_MARK`].
    pub fn render_table(&self) -> String {
        let cols = self.class_columns();
        let (best_dice, best_avd) = self.best_per_column();
        let name_width = self
            .experiments
            .iter()
            .map(|e| e.experiment.len())
            .max()
            .unwrap_or(10)
            .max("Experiment".len());
        let mut out = String::new();
        let _ = write!(out, "{:<name_width$}", "Experiment");
        for c in &cols {
            let _ = write!(out, " | {:>9}", format!("Dice {c}"));
        }
        for c in &cols {
            let _ = write!(out, " | {:>9}", format!("AVD {c}"));
        }
        out.push('\n');
        for (i, e) in self.experiments.iter().enumerate() {
            let _ = write!(out, "{:<name_width$}", e.experiment);
            let cell = |v: Option<f64>, best: bool| match v {
                Some(v) if best => format!("{v:.3}{BEST_MARK}"),
                Some(v) => format!("{v:.3}"),
                None => "-".to_string(),
            };
            for (j, c) in cols.iter().enumerate() {
                let v = e.classes.iter().find(|s| &s.class_name == c).and_then(|s| s.mean_dice);
                let _ = write!(out, " | {:>9}", cell(v, best_dice[j] == Some(i)));
            }
            for (j, c) in cols.iter().enumerate() {
                let v = e.classes.iter().find(|s| &s.class_name == c).map(|s| s.mean_avd_mm3);
                let _ = write!(out, " | {:>9}", cell(v, best_avd[j] == Some(i)));
            }
            out.push('\n');
        }
        out
    }

    /// One line per record: `experiment,volume_id,vendor,class,dice,avd_mm3`;
    /// undefined Dice is an empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,volume_id,vendor,class,dice,avd_mm3\n");
        for r in &self.records {
            let rec = &r.record;
            let dice = rec.dice.map(|d| format!("{d:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                r.experiment, rec.volume_id, rec.vendor, rec.class_name, dice, rec.avd_mm3
            );
        }
        out
    }
}
