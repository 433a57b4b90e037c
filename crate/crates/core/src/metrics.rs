//! Evaluation metrics for age regression and gender classification.
//!
//! Age regression is scored with MAE, MSE, R², the cumulative score CS_j
//! (percentage of predictions within `j` years of the truth) and its mean
//! MCS-J over thresholds 0..=J. Gender classification is scored from a
//! confusion-count table.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Paired actual/predicted age vectors for one evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    actual: Vec<f64>,
    predicted: Vec<f64>,
}

impl EvalBatch {
    pub fn new(actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        if actual.is_empty() {
            return Err(Error::InvalidInput("evaluation batch is empty".into()));
        }
        if actual.len() != predicted.len() {
            return Err(Error::InvalidInput(format!(
                "actual/predicted length mismatch: {} vs {}",
                actual.len(),
                predicted.len()
            )));
        }
        if actual.iter().chain(predicted.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "evaluation batch contains non-finite values".into(),
            ));
        }
        Ok(EvalBatch { actual, predicted })
    }

    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    pub fn actual(&self) -> &[f64] {
        &self.actual
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    /// Absolute errors `|a_i - p_i|`.
    pub fn distances(&self) -> Vec<f64> {
        self.actual
            .iter()
            .zip(&self.predicted)
            .map(|(a, p)| (a - p).abs())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionReport {
    pub mae: f64,
    pub mse: f64,
    /// `NaN` when the total sum of squares is zero (all actual values equal).
    pub r_squared: f64,
}

/// Binary confusion counts; "male" is the positive class throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<Self> {
        if tp + fp + tn + fn_ == 0 {
            return Err(Error::InvalidInput("confusion counts are all zero".into()));
        }
        Ok(ConfusionCounts { tp, fp, tn, fn_ })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Which F1 formula to report.
///
/// `Paper` combines specificity and sensitivity harmonically; `Standard`
/// is the usual harmonic mean of precision (PPV) and sensitivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Variant {
    Paper,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenderReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub npv: f64,
    pub f1: f64,
    pub accuracy_percent: f64,
}

/// MAE, MSE and R² over one batch.
///
/// R² uses RSS = Σ(a_i−p_i)² against TSS = Σ(a_i − mean(a))². A degenerate
/// batch where every actual value is equal has TSS = 0; R² is then reported
/// as NaN with a warning instead of failing the whole report.
pub fn regression_metrics(batch: &EvalBatch) -> RegressionReport {
    let n = batch.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (a, p) in batch.actual.iter().zip(&batch.predicted) {
        let d = a - p;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    let mae = abs_sum / n;
    let mse = sq_sum / n;

    let mean_actual = batch.actual.iter().sum::<f64>() / n;
    let tss: f64 = batch
        .actual
        .iter()
        .map(|a| (a - mean_actual) * (a - mean_actual))
        .sum();
    let rss = sq_sum;
    let r_squared = if tss == 0.0 {
        log::warn!("total sum of squares is zero (all actual values equal); R^2 undefined");
        f64::NAN
    } else {
        1.0 - rss / tss
    };
    RegressionReport { mae, mse, r_squared }
}

/// Cumulative score CS_j: percentage of samples with `|a_i - p_i| <= j`.
///
/// A distance exactly at the threshold counts as a hit.
pub fn cs_score(batch: &EvalBatch, j: u32) -> f64 {
    let threshold = j as f64;
    let hits = batch
        .actual
        .iter()
        .zip(&batch.predicted)
        .filter(|(a, p)| (*a - *p).abs() <= threshold)
        .count();
    100.0 * hits as f64 / batch.len() as f64
}

/// Mean cumulative score MCS-J: mean of CS_j for j = 0..=J.
pub fn mcs_score(batch: &EvalBatch, max_j: u32) -> f64 {
    let sum: f64 = (0..=max_j).map(|j| cs_score(batch, j)).sum();
    sum / (max_j as f64 + 1.0)
}

fn rate(metric: &str, num: u64, den: u64) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric {
            metric: metric.to_string(),
            reason: "zero denominator".to_string(),
        });
    }
    Ok(num as f64 / den as f64)
}

/// Confusion-derived classification scores.
///
/// Accuracy uses (TP+TN)/total; the F1 numerator pair depends on `variant`.
pub fn classification_report(counts: &ConfusionCounts, variant: F1Variant) -> Result<GenderReport> {
    let sensitivity = rate("sensitivity", counts.tp, counts.tp + counts.fn_)?;
    let specificity = rate("specificity", counts.tn, counts.tn + counts.fp)?;
    let ppv = rate("ppv", counts.tp, counts.tp + counts.fp)?;
    let npv = rate("npv", counts.tn, counts.tn + counts.fn_)?;
    let (x, y) = match variant {
        F1Variant::Paper => (specificity, sensitivity),
        F1Variant::Standard => (ppv, sensitivity),
    };
    if x + y == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "f1".to_string(),
            reason: "zero denominator".to_string(),
        });
    }
    let f1 = 2.0 * x * y / (x + y);
    let accuracy_percent = 100.0 * (counts.tp + counts.tn) as f64 / counts.total() as f64;
    Ok(GenderReport {
        sensitivity,
        specificity,
        ppv,
        npv,
        f1,
        accuracy_percent,
    })
}

// ---------------------------------------------------------------------------
// Prediction-dump I/O
// ---------------------------------------------------------------------------

/// Gender token accepted in prediction dumps.
pub fn parse_gender(token: &str) -> Result<bool> {
    match token.trim().to_ascii_lowercase().as_str() {
        "male" | "m" => Ok(true),
        "female" | "f" => Ok(false),
        other => Err(Error::InvalidInput(format!("unknown gender token `{other}`"))),
    }
}

/// Reads `sample_id,actual_age,predicted_age` rows into an [`EvalBatch`].
pub fn read_age_predictions(path: &Path) -> Result<EvalBatch> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    expect_headers(path, &mut reader, &["sample_id", "actual_age", "predicted_age"])?;
    let mut actual = Vec::new();
    let mut predicted = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let a: f64 = parse_field(path, line, record.get(1), "actual_age")?;
        let p: f64 = parse_field(path, line, record.get(2), "predicted_age")?;
        actual.push(a);
        predicted.push(p);
    }
    EvalBatch::new(actual, predicted)
}

/// Reads `sample_id,actual_gender,predicted_gender` rows into confusion counts.
///
/// "male" is counted as the positive class.
pub fn read_gender_predictions(path: &Path) -> Result<ConfusionCounts> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    expect_headers(
        path,
        &mut reader,
        &["sample_id", "actual_gender", "predicted_gender"],
    )?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let actual = parse_gender(record.get(1).unwrap_or("")).map_err(|e| {
            Error::format(path.display().to_string(), format!("line {line}: {e}"))
        })?;
        let predicted = parse_gender(record.get(2).unwrap_or("")).map_err(|e| {
            Error::format(path.display().to_string(), format!("line {line}: {e}"))
        })?;
        match (actual, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    ConfusionCounts::new(tp, fp, tn, fn_)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

fn expect_headers(
    path: &Path,
    reader: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
) -> Result<()> {
    let headers = reader.headers().map_err(|e| csv_error(path, e))?;
    let got: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    if got != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected header {expected:?}, got {got:?}"),
        ));
    }
    Ok(())
}

fn parse_field(path: &Path, line: usize, field: Option<&str>, name: &str) -> Result<f64> {
    field
        .ok_or_else(|| {
            Error::format(path.display().to_string(), format!("line {line}: missing {name}"))
        })?
        .trim()
        .parse::<f64>()
        .map_err(|_| {
            Error::format(
                path.display().to_string(),
                format!("line {line}: {name} is not a number"),
            )
        })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// A small column-labelled table printable as CSV or aligned text.
#[derive(Clone, Debug)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricTable {
    pub fn new(columns: &[&str]) -> Self {
        MetricTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::InvalidInput(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((label.into(), values));
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, values) in &self.rows {
            out.push_str(label);
            for v in values {
                out.push(',');
                out.push_str(&format_cell(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width rendering with three decimals, like the printed tables.
    pub fn to_aligned_text(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|(l, _)| l.len())
            .chain(std::iter::once(3))
            .max()
            .unwrap_or(3);
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(_, vs)| vs.iter().map(|v| format_cell(*v)).collect())
            .collect();
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = format!("{:<label_width$}", "row");
        for (c, w) in self.columns.iter().zip(&widths) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for ((label, _), row) in self.rows.iter().zip(&cells) {
            out.push_str(&format!("{label:<label_width$}"));
            for (cell, w) in row.iter().zip(&widths) {
                out.push_str(&format!("  {cell:>w$}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// Table 1-style column set for one age-regression evaluation.
pub fn age_metric_row(batch: &EvalBatch) -> (Vec<&'static str>, Vec<f64>) {
    let reg = regression_metrics(batch);
    let mut values = vec![reg.mae, reg.mse];
    for j in 0..=5 {
        values.push(cs_score(batch, j));
    }
    values.push(mcs_score(batch, 2));
    values.push(mcs_score(batch, 3));
    values.push(mcs_score(batch, 4));
    values.push(reg.r_squared);
    (AGE_COLUMNS.to_vec(), values)
}

pub const AGE_COLUMNS: [&str; 12] = [
    "MAE", "MSE", "CS_0", "CS_1", "CS_2", "CS_3", "CS_4", "CS_5", "MCS-2", "MCS-3", "MCS-4", "R2",
];

/// Table 3-style column set for one gender-classification evaluation.
pub fn gender_metric_row(counts: &ConfusionCounts, variant: F1Variant) -> Result<(Vec<&'static str>, Vec<f64>)> {
    let rep = classification_report(counts, variant)?;
    Ok((
        GENDER_COLUMNS.to_vec(),
        vec![
            counts.tp as f64,
            counts.fp as f64,
            counts.tn as f64,
            counts.fn_ as f64,
            rep.specificity,
            rep.sensitivity,
            rep.ppv,
            rep.npv,
            rep.f1,
            rep.accuracy_percent,
        ],
    ))
}

pub const GENDER_COLUMNS: [&str; 10] = [
    "TP", "FP", "TN", "FN", "Specificity", "Sensitivity", "PPV", "NPV", "F1", "Acc%",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn batch(actual: &[f64], predicted: &[f64]) -> EvalBatch {
        EvalBatch::new(actual.to_vec(), predicted.to_vec()).unwrap()
    }

    #[test]
    fn regression_hand_enumeration() {
        // RSS = 10, TSS = 200
        let r = regression_metrics(&batch(&[10.0, 20.0, 30.0], &[10.0, 21.0, 33.0]));
        assert!(close(r.mae, 4.0 / 3.0, 1e-12));
        assert!(close(r.mse, 10.0 / 3.0, 1e-12));
        assert!(close(r.r_squared, 0.95, 1e-12));
    }

    #[test]
    fn regression_identity_case() {
        let r = regression_metrics(&batch(&[5.0, 7.0, 9.0], &[5.0, 7.0, 9.0]));
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.r_squared, 1.0);
    }

    #[test]
    fn regression_can_go_negative() {
        // RSS = 2, TSS = 0.5
        let r = regression_metrics(&batch(&[1.0, 2.0], &[2.0, 1.0]));
        assert!(close(r.mae, 1.0, 1e-12));
        assert!(close(r.mse, 1.0, 1e-12));
        assert!(close(r.r_squared, -3.0, 1e-12));
    }

    #[test]
    fn regression_zero_tss_is_nan() {
        let r = regression_metrics(&batch(&[4.0, 4.0], &[3.0, 5.0]));
        assert!(r.r_squared.is_nan());
        assert!(r.mae == 1.0);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(EvalBatch::new(vec![], vec![]).is_err());
        assert!(EvalBatch::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(EvalBatch::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn cs_examples() {
        let b = batch(&[10.0, 20.0, 30.0], &[10.0, 21.0, 33.0]);
        assert!(close(cs_score(&b, 1), 100.0 * 2.0 / 3.0, 1e-9));
        assert!(close(cs_score(&b, 3), 100.0, 1e-9));
        let same = batch(&[5.0, 6.0], &[5.0, 6.0]);
        assert_eq!(cs_score(&same, 0), 100.0);
        assert_eq!(cs_score(&same, 7), 100.0);
    }

    #[test]
    fn cs_threshold_tie_counts_as_hit() {
        let b = batch(&[10.0], &[12.0]);
        assert_eq!(cs_score(&b, 2), 100.0);
        assert_eq!(cs_score(&b, 1), 0.0);
    }

    #[test]
    fn mcs_examples() {
        let b = batch(&[10.0, 20.0, 30.0], &[10.0, 21.0, 33.0]);
        // CS_0 = 33.333, CS_1 = 66.667, CS_2 = 66.667
        assert!(close(mcs_score(&b, 2), 500.0 / 9.0, 1e-9));
        let same = batch(&[5.0, 6.0], &[5.0, 6.0]);
        assert_eq!(mcs_score(&same, 4), 100.0);
    }

    #[test]
    fn cs_monotone_in_threshold() {
        let b = batch(&[1.0, 50.0, 80.0, 20.0], &[3.0, 40.0, 90.0, 20.0]);
        let mut prev = -1.0;
        for j in 0..=15 {
            let cs = cs_score(&b, j);
            assert!(cs >= prev);
            prev = cs;
        }
        assert_eq!(cs_score(&b, 10), 100.0);
    }

    #[test]
    fn classification_table3_row() {
        let counts = ConfusionCounts::new(1141, 74, 1065, 121).unwrap();
        let r = classification_report(&counts, F1Variant::Paper).unwrap();
        assert!(close(r.sensitivity, 0.904, 5e-4));
        assert!(close(r.specificity, 0.935, 5e-4));
        assert!(close(r.ppv, 0.939, 5e-4));
        assert!(close(r.npv, 0.898, 5e-4));
        assert!(close(r.f1, 0.919, 5e-4));
        assert!(close(r.accuracy_percent, 91.878, 5e-3));
    }

    #[test]
    fn classification_trivial_and_symmetric() {
        let perfect = ConfusionCounts::new(1, 0, 1, 0).unwrap();
        let r = classification_report(&perfect, F1Variant::Paper).unwrap();
        assert_eq!(r.sensitivity, 1.0);
        assert_eq!(r.specificity, 1.0);
        assert_eq!(r.ppv, 1.0);
        assert_eq!(r.npv, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.accuracy_percent, 100.0);

        let even = ConfusionCounts::new(1, 1, 1, 1).unwrap();
        let r = classification_report(&even, F1Variant::Standard).unwrap();
        assert_eq!(r.sensitivity, 0.5);
        assert_eq!(r.specificity, 0.5);
        assert_eq!(r.ppv, 0.5);
        assert_eq!(r.npv, 0.5);
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.accuracy_percent, 50.0);
    }

    #[test]
    fn f1_variants_coincide_when_ppv_equals_specificity() {
        // tp=2, fp=1, tn=4, fn=1: ppv = 2/3, specificity = 4/5 — differ.
        // tp=3, fp=1, tn=3, fn=2: ppv = 3/4, specificity = 3/4 — coincide.
        let counts = ConfusionCounts::new(3, 1, 3, 2).unwrap();
        let paper = classification_report(&counts, F1Variant::Paper).unwrap();
        let std = classification_report(&counts, F1Variant::Standard).unwrap();
        assert!(close(paper.f1, std.f1, 1e-15));
    }

    #[test]
    fn zero_denominator_names_metric() {
        let counts = ConfusionCounts::new(0, 2, 3, 0).unwrap();
        let err = classification_report(&counts, F1Variant::Paper).unwrap_err();
        match err {
            Error::UndefinedMetric { metric, .. } => assert_eq!(metric, "sensitivity"),
            other => panic!("unexpected error {other:?}"),
        }
        // ppv breaks next when nothing is ever predicted positive
        let counts = ConfusionCounts::new(0, 0, 3, 2).unwrap();
        let err = classification_report(&counts, F1Variant::Paper).unwrap_err();
        match err {
            Error::UndefinedMetric { metric, .. } => assert_eq!(metric, "ppv"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn regression_permutation_invariant() {
        let a = vec![3.0, 9.0, 27.0, 41.0];
        let p = vec![4.0, 8.5, 30.0, 40.0];
        let r1 = regression_metrics(&batch(&a, &p));
        let perm = [2usize, 0, 3, 1];
        let a2: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let p2: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let r2 = regression_metrics(&batch(&a2, &p2));
        assert!(close(r1.mae, r2.mae, 1e-12));
        assert!(close(r1.mse, r2.mse, 1e-12));
        assert!(close(r1.r_squared, r2.r_squared, 1e-12));
    }

    #[test]
    fn prediction_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let age_path = dir.path().join("age.csv");
        std::fs::write(
            &age_path,
            "sample_id,actual_age,predicted_age\ns1,10,10\ns2,20,21\ns3,30,33\n",
        )
        .unwrap();
        let b = read_age_predictions(&age_path).unwrap();
        assert_eq!(b.len(), 3);
        assert!(close(regression_metrics(&b).mae, 4.0 / 3.0, 1e-12));

        let gender_path = dir.path().join("gender.csv");
        std::fs::write(
            &gender_path,
            "sample_id,actual_gender,predicted_gender\n\
             s1,male,male\ns2,female,male\ns3,female,female\ns4,male,female\n",
        )
        .unwrap();
        let c = read_gender_predictions(&gender_path).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
    }

    #[test]
    fn prediction_dump_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,a,p\nx,1,2\n").unwrap();
        assert!(read_age_predictions(&path).is_err());
    }

    #[test]
    fn table_renders_csv_and_text() {
        let mut t = MetricTable::new(&["MAE", "MSE"]);
        t.push_row("FCV-1", vec![1.0, 2.0]).unwrap();
        t.push_row("Average", vec![1.5, 2.5]).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("row,MAE,MSE\n"));
        assert!(csv.contains("FCV-1,1.000,2.000"));
        let text = t.to_aligned_text();
        assert!(text.contains("Average"));
        assert!(t.push_row("bad", vec![1.0]).is_err());
    }
}
