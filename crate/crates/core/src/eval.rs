//! Confusion counts, IoU, ROC-AUC, runtime statistics and CSV reports.
//!
//! The noise class is positive: a removed noise echo is a true positive, a
//! removed valid echo a false positive, a kept noise echo a false negative.
//! Artifact labels count as noise. Echoes labeled empty are skipped.

use std::io;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cloud::{Label, LabelGrid, MultiEchoOrderedCloud};
use crate::error::{Error, Result};
use crate::inference::EchoClass;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Noise-class IoU: TP / (TP + FP + FN).
    pub fn iou(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_, "noise IoU")
    }

    /// Valid-class IoU: TN / (TN + FP + FN).
    pub fn valid_iou(&self) -> Result<f64> {
        ratio(self.tn, self.tn + self.fp + self.fn_, "valid IoU")
    }

    pub fn precision(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fp, "precision")
    }

    pub fn recall(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_, "recall")
    }
}

fn ratio(num: u64, den: u64, what: &'static str) -> Result<f64> {
    if den == 0 {
        Err(Error::UndefinedMetric(what))
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// Counts removal decisions (`true` = removed as noise) against labels, one per echo.
pub fn evaluate(removed: &[bool], labels: &LabelGrid) -> Result<ConfusionCounts> {
    if removed.len() != labels.labels().len() {
        return Err(Error::Alignment(format!(
            "{} decisions for {} labeled echoes",
            removed.len(),
            labels.labels().len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&r, &l) in removed.iter().zip(labels.labels()) {
        match (l, r) {
            (Label::Empty, _) => {}
            (l, true) if l.is_noise() => c.tp += 1,
            (_, true) => c.fp += 1,
            (l, false) if l.is_noise() => c.fn_ += 1,
            (_, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Removal decisions of classified echoes: everything discarded counts as removed.
pub fn removed_echoes(classes: &[EchoClass]) -> Vec<bool> {
    classes.iter().map(|&c| c == EchoClass::Discarded).collect()
}

/// Substitute recovery on scans where a particle hides a true return.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstituteCounts {
    /// Cells whose strongest echo is noise and that hold a valid later echo.
    pub recoverable: u64,
    /// Recoverable cells where a valid later echo became the substitute.
    pub recovered: u64,
    /// Substitutes drawn from noise echoes or placed where no true return exists.
    pub false_substitutes: u64,
    /// All substitutes emitted.
    pub substitutes: u64,
}

impl Add for SubstituteCounts {
    type Output = SubstituteCounts;
    fn add(self, o: SubstituteCounts) -> SubstituteCounts {
        SubstituteCounts {
            recoverable: self.recoverable + o.recoverable,
            recovered: self.recovered + o.recovered,
            false_substitutes: self.false_substitutes + o.false_substitutes,
            substitutes: self.substitutes + o.substitutes,
        }
    }
}

impl SubstituteCounts {
    pub fn recovery_rate(&self) -> Result<f64> {
        ratio(self.recovered, self.recoverable, "substitute recovery")
    }

    /// Share of emitted substitutes that are not true returns.
    pub fn false_rate(&self) -> Result<f64> {
        ratio(self.false_substitutes, self.substitutes, "false-substitute rate")
    }
}

pub fn substitute_recovery(
    cloud: &MultiEchoOrderedCloud,
    classes: &[EchoClass],
    labels: &LabelGrid,
) -> Result<SubstituteCounts> {
    labels.check_against(cloud)?;
    if classes.len() != cloud.len() {
        return Err(Error::Alignment(format!("{} classes for {} echoes", classes.len(), cloud.len())));
    }
    let ne = cloud.echoes();
    let mut c = SubstituteCounts::default();
    for cell in 0..cloud.groups() {
        let l = &labels.labels()[cell * ne..(cell + 1) * ne];
        let k = &classes[cell * ne..(cell + 1) * ne];
        let recoverable = l[0].is_noise() && l[1..].contains(&Label::ValidObject);
        if recoverable {
            c.recoverable += 1;
        }
        for e in 1..ne {
            if k[e] == EchoClass::Substitute {
                c.substitutes += 1;
                if l[e] == Label::ValidObject {
                    if recoverable {
                        c.recovered += 1;
                    }
                } else {
                    c.false_substitutes += 1;
                }
            }
        }
    }
    Ok(c)
}

/// Area under the ROC curve of `scores` for separating positives (higher
/// score = more likely positive). Tied scores count half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Alignment("scores and labels differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes"));
    }
    // Mann-Whitney U with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Per-scan wall time statistics in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub scans: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Number of untimed runs before measurement starts.
pub const WARMUP_RUNS: usize = 3;

/// Times `run` on every scan after [`WARMUP_RUNS`] untimed runs.
pub fn benchmark<T>(dataset: &[T], mut run: impl FnMut(&T) -> Result<()>) -> Result<RuntimeStats> {
    if dataset.is_empty() {
        return Err(Error::EmptySubset);
    }
    for i in 0..WARMUP_RUNS {
        run(&dataset[i % dataset.len()])?;
    }
    let mut times = Vec::with_capacity(dataset.len());
    for scan in dataset {
        let t = Instant::now();
        run(scan)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(runtime_stats(times))
}

/// Median and nearest-rank 95th percentile of per-scan times (ms).
pub fn runtime_stats(mut times: Vec<f64>) -> RuntimeStats {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    RuntimeStats {
        scans: n,
        median_ms: median,
        p95_ms: times[rank - 1],
    }
}

/// One report line: a method on one severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub severity: String,
    pub scans: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou_noise: Option<f64>,
    pub iou_valid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Mean of per-scan noise IoU over scans where it is defined.
    pub mean_scan_iou: Option<f64>,
    pub median_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub parameters: Option<usize>,
}

impl ReportRow {
    /// Pooled metrics over per-scan counts.
    pub fn from_scans(method: &str, severity: &str, per_scan: &[ConfusionCounts]) -> Self {
        let pooled: ConfusionCounts = per_scan.iter().copied().sum();
        let ious: Vec<f64> = per_scan.iter().filter_map(|c| c.iou().ok()).collect();
        ReportRow {
            method: method.to_string(),
            severity: severity.to_string(),
            scans: per_scan.len(),
            tp: pooled.tp,
            fp: pooled.fp,
            fn_: pooled.fn_,
            tn: pooled.tn,
            iou_noise: pooled.iou().ok(),
            iou_valid: pooled.valid_iou().ok(),
            precision: pooled.precision().ok(),
            recall: pooled.recall().ok(),
            mean_scan_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
            median_ms: None,
            p95_ms: None,
            parameters: None,
        }
    }

    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn with_runtime(mut self, stats: &RuntimeStats) -> Self {
        self.median_ms = Some(stats.median_ms);
        self.p95_ms = Some(stats.p95_ms);
        self
    }
}

/// Columns: method, severity, scans, tp, fp, fn, tn, iou_noise, iou_valid,
/// precision, recall, mean_scan_iou, median_ms, p95_ms, parameters. Undefined
/// values are empty fields.
pub fn write_report(rows: &[ReportRow], out: impl io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(input: impl io::Read) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_report_file(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    write_report(rows, std::fs::File::create(path)?)
}

pub fn read_report_file(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    read_report(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(labels: Vec<Label>) -> LabelGrid {
        let n = labels.len();
        LabelGrid::new(1, n, 1, labels).unwrap()
    }

    #[test]
    fn iou_examples() {
        let c = ConfusionCounts {
            tp: 8,
            fp: 1,
            fn_: 1,
            tn: 50,
        };
        assert_eq!(c.iou().unwrap(), 0.8);
        let none = ConfusionCounts {
            tp: 0,
            fp: 2,
            fn_: 1,
            tn: 0,
        };
        assert_eq!(none.iou().unwrap(), 0.0);
        assert!(matches!(ConfusionCounts::default().iou(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn all_noise_scan() {
        let l = grid(vec![Label::NoiseParticle; 4]);
        assert_eq!(evaluate(&[true; 4], &l).unwrap().iou().unwrap(), 1.0);
        assert_eq!(evaluate(&[false; 4], &l).unwrap().iou().unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_fixture() {
        use Label::*;
        // Ten echoes: noise removed x3, noise kept x1, valid removed x2,
        // valid kept x2, artifact removed x1, empty x1.
        let labels = grid(vec![
            NoiseParticle,
            NoiseParticle,
            NoiseParticle,
            NoiseParticle,
            ValidObject,
            ValidObject,
            ValidObject,
            ValidObject,
            Artifact,
            Empty,
        ]);
        let removed = [true, true, true, false, true, true, false, false, true, true];
        let c = evaluate(&removed, &labels).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 4,
                fp: 2,
                fn_: 1,
                tn: 2
            }
        );
        assert_eq!(c.total(), 9);
        assert!((c.iou().unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((c.valid_iou().unwrap() - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn misaligned_prediction() {
        assert!(matches!(
            evaluate(&[true; 3], &grid(vec![Label::ValidObject; 4])),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn auc_values() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn runtime_order_statistics() {
        let s = runtime_stats((1..=20).map(f64::from).collect());
        assert_eq!(s.median_ms, 10.5);
        assert_eq!(s.p95_ms, 19.0);
        let s = runtime_stats(vec![3.0; 10]);
        assert!(s.p95_ms >= s.median_ms);
        assert!(matches!(benchmark::<u8>(&[], |_| Ok(())), Err(Error::EmptySubset)));
    }

    #[test]
    fn benchmark_counts_runs() {
        let mut calls = 0;
        let s = benchmark(&[1, 2], |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, WARMUP_RUNS + 2);
        assert_eq!(s.scans, 2);
    }

    #[test]
    fn report_csv_round_trip() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 0,
            tn: 9,
        };
        let rows = vec![
            ReportRow::from_scans("smednet", "light", &[c, ConfusionCounts::default()]).with_runtime(&RuntimeStats {
                scans: 2,
                median_ms: 1.25,
                p95_ms: 2.5,
            }),
            ReportRow::from_scans("dror", "heavy", &[]),
        ];
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,severity,scans,tp,fp,fn,tn,iou_noise"));
        assert_eq!(read_report(&buf[..]).unwrap(), rows);
    }
}
