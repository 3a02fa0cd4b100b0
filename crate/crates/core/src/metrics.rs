//! Evaluation metrics and the comparison report schema.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Thresholds reported in every table.
pub const IOU_THRESHOLDS: [f64; 2] = [0.5, 0.7];

/// Overlap of a possibly degenerate predicted box with a valid box.
/// Mis-ordered coordinates give zero width or height; `0/0` is 0.
pub fn iou(a: [f64; 4], b: &BoundingBox) -> f64 {
    let aw = (a[2] - a[0]).max(0.0);
    let ah = (a[3] - a[1]).max(0.0);
    let iw = (a[2].min(b.x_max) - a[0].max(b.x_min)).max(0.0);
    let ih = (a[3].min(b.y_max) - a[1].max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = aw * ah + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub record_id: String,
    pub logits: Vec<f64>,
    pub pred_box: [f64; 4],
    pub target: usize,
    pub target_box: BoundingBox,
}

impl PredictionRecord {
    pub fn iou(&self) -> f64 {
        iou(self.pred_box, &self.target_box)
    }

    /// Rank of the target among the logits (0 = best); ties favour the
    /// lower class index.
    pub fn target_rank(&self) -> usize {
        let t = self.logits[self.target];
        self.logits
            .iter()
            .enumerate()
            .filter(|&(k, &v)| v > t || (v == t && k < self.target))
            .count()
    }

    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = k;
            }
        }
        best
    }
}

fn non_empty(preds: &[PredictionRecord]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract("metric over an empty prediction list".into()));
    }
    Ok(())
}

pub fn mean_iou(preds: &[PredictionRecord]) -> Result<f64> {
    non_empty(preds)?;
    Ok(preds.iter().map(PredictionRecord::iou).sum::<f64>() / preds.len() as f64)
}

/// Fraction of records whose IoU is strictly greater than `threshold`.
pub fn loc_accuracy(preds: &[PredictionRecord], threshold: f64) -> Result<f64> {
    non_empty(preds)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("IoU threshold {threshold} outside (0, 1)")));
    }
    let hits = preds.iter().filter(|p| p.iou() > threshold).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn topn_accuracy(preds: &[PredictionRecord], n: usize) -> Result<f64> {
    non_empty(preds)?;
    for p in preds {
        let k = p.logits.len();
        if n == 0 || n > k {
            return Err(Error::Contract(format!("top-{n} requested with {k} classes")));
        }
        if p.target >= k {
            return Err(Error::Contract(format!(
                "record `{}` target {} out of range for {k} classes",
                p.record_id, p.target
            )));
        }
    }
    let hits = preds.iter().filter(|p| p.target_rank() < n).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Ssl,
    Random,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Ssl => "SSL",
            Self::Random => "Random",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "ssl" => Ok(Self::Ssl),
            "random" => Ok(Self::Random),
            _ => Err(Error::Contract(format!("unknown method tag `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatasetTag {
    Tiny,
    Full,
}

impl DatasetTag {
    pub fn label(self) -> &'static str {
        match self {
            Self::Tiny => "TINY",
            Self::Full => "FULL",
        }
    }
}

impl FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TINY" => Ok(Self::Tiny),
            "FULL" => Ok(Self::Full),
            _ => Err(Error::Contract(format!("unknown dataset tag `{s}`"))),
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Tags attached to a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportContext {
    pub dataset: String,
    pub method: String,
    pub n_per_class: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetTag,
    pub method: Method,
    pub n_per_class: usize,
    pub seed: u64,
    pub num_records: usize,
    pub top1: f64,
    pub top3: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    pub mean_iou: f64,
    pub acc_iou_05: f64,
    pub acc_iou_07: f64,
    /// Comparison used for the localisation accuracies.
    pub threshold_rule: String,
}

pub const STRICT_RULE: &str = "iou > threshold";

pub fn build_report(preds: &[PredictionRecord], ctx: &ReportContext) -> Result<EvalReport> {
    if ctx.dataset.trim().is_empty() || ctx.method.trim().is_empty() {
        return Err(Error::Contract("report context tags must not be empty".into()));
    }
    if ctx.n_per_class == 0 {
        return Err(Error::Contract("report context n_per_class must be positive".into()));
    }
    non_empty(preds)?;
    let k = preds[0].logits.len();
    if preds.iter().any(|p| p.logits.len() != k) {
        return Err(Error::Contract("prediction records disagree on class count".into()));
    }
    let report = EvalReport {
        dataset: ctx.dataset.parse()?,
        method: ctx.method.parse()?,
        n_per_class: ctx.n_per_class,
        seed: ctx.seed,
        num_records: preds.len(),
        top1: topn_accuracy(preds, 1)?,
        top3: topn_accuracy(preds, 3.min(k))?,
        top5: if k > 5 { Some(topn_accuracy(preds, 5)?) } else { None },
        mean_iou: mean_iou(preds)?,
        acc_iou_05: loc_accuracy(preds, IOU_THRESHOLDS[0])?,
        acc_iou_07: loc_accuracy(preds, IOU_THRESHOLDS[1])?,
        threshold_rule: STRICT_RULE.into(),
    };
    report.validate()?;
    Ok(report)
}

/// Column names in table order.
pub fn metric_columns(with_top5: bool) -> Vec<&'static str> {
    let mut cols = vec!["Top-1 Acc", "Top-3 Acc"];
    if with_top5 {
        cols.push("Top-5 Acc");
    }
    cols.extend(["Mean IoU", "Acc IoU 0.5", "Acc IoU 0.7"]);
    cols
}

fn csv_columns(with_top5: bool) -> Vec<&'static str> {
    let mut cols = vec!["n", "method", "top1", "top3"];
    if with_top5 {
        cols.push("top5");
    }
    cols.extend(["mean_iou", "acc_iou_05", "acc_iou_07"]);
    cols
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut vals = vec![self.top1, self.top3, self.mean_iou, self.acc_iou_05, self.acc_iou_07];
        vals.extend(self.top5);
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("report metric outside [0, 1]".into()));
        }
        if self.acc_iou_07 > self.acc_iou_05 {
            return Err(Error::Invariant("Acc IoU 0.7 exceeds Acc IoU 0.5".into()));
        }
        Ok(())
    }

    /// Metric values in table column order.
    pub fn metric_values(&self) -> Vec<f64> {
        let mut v = vec![self.top1, self.top3];
        v.extend(self.top5);
        v.extend([self.mean_iou, self.acc_iou_05, self.acc_iou_07]);
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    /// Header plus one row, columns in table order.
    pub fn to_csv(&self) -> Result<String> {
        reports_to_csv(std::slice::from_ref(self))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Contract(format!("csv: {e}"))
}

/// All reports must share the same column layout.
pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let with_top5 = reports.first().map(|r| r.top5.is_some()).unwrap_or(false);
    if reports.iter().any(|r| r.top5.is_some() != with_top5) {
        return Err(Error::Contract("reports mix Top-5 and non-Top-5 layouts".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_columns(with_top5)).map_err(csv_error)?;
    for r in reports {
        let mut row = vec![r.n_per_class.to_string(), r.method.label().to_string()];
        row.extend(r.metric_values().iter().map(|v| format!("{v:.4}")));
        w.write_record(&row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Plain-text grid: one row per (n, method), columns in table order.
pub fn render_table(reports: &[EvalReport]) -> String {
    let with_top5 = reports.iter().any(|r| r.top5.is_some());
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.n_per_class, r.method));
    let mut header = vec!["n", "Method"];
    header.extend(metric_columns(with_top5));
    let widths: Vec<usize> = header.iter().map(|h| h.len().max(8)).collect();

    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let row: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", row.join(" | "));
    };
    line(&mut out, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
    );
    for r in sorted {
        let mut cells = vec![r.n_per_class.to_string(), r.method.label().to_string()];
        let vals = r.metric_values();
        if with_top5 && r.top5.is_none() {
            cells.extend(vals[..2].iter().map(|v| format!("{v:.4}")));
            cells.push("-".into());
            cells.extend(vals[2..].iter().map(|v| format!("{v:.4}")));
        } else {
            cells.extend(vals.iter().map(|v| format!("{v:.4}")));
        }
        line(&mut out, &cells);
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `ours - reference` for one `n`, per metric column, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRow {
    pub n_per_class: usize,
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seeds: usize,
}

/// Pairs reports of `ours` and `reference` by `(n, seed)` and averages the
/// per-seed differences over seeds.
pub fn compare_reports(reports: &[EvalReport], ours: Method, reference: Method) -> Result<Vec<DifferenceRow>> {
    let with_top5 = reports.iter().any(|r| r.top5.is_some());
    if reports.iter().any(|r| r.top5.is_some() != with_top5) {
        return Err(Error::Contract("reports mix Top-5 and non-Top-5 layouts".into()));
    }
    let columns: Vec<String> = metric_columns(with_top5).into_iter().map(String::from).collect();
    let mut ns: Vec<usize> = reports.iter().map(|r| r.n_per_class).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut rows = Vec::new();
    for n in ns {
        let mut diffs: Vec<Vec<f64>> = Vec::new();
        for a in reports.iter().filter(|r| r.n_per_class == n && r.method == ours) {
            let b = reports
                .iter()
                .find(|r| r.n_per_class == n && r.method == reference && r.seed == a.seed)
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "no {} report for n={n}, seed={} to pair with {}",
                        reference.label(),
                        a.seed,
                        ours.label()
                    ))
                })?;
            diffs.push(a.metric_values().iter().zip(b.metric_values()).map(|(x, y)| x - y).collect());
        }
        if diffs.is_empty() {
            continue;
        }
        let (mean, std): (Vec<f64>, Vec<f64>) = (0..columns.len())
            .map(|c| mean_std(&diffs.iter().map(|d| d[c]).collect::<Vec<_>>()))
            .unzip();
        rows.push(DifferenceRow {
            n_per_class: n,
            columns: columns.clone(),
            mean,
            std,
            seeds: diffs.len(),
        });
    }
    Ok(rows)
}

pub fn differences_to_csv(rows: &[DifferenceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = rows.first() {
        let mut header = vec!["n".to_string(), "seeds".to_string()];
        for c in &first.columns {
            header.push(format!("{c} diff"));
            header.push(format!("{c} std"));
        }
        w.write_record(&header).map_err(csv_error)?;
    }
    for r in rows {
        let mut row = vec![r.n_per_class.to_string(), r.seeds.to_string()];
        for (m, s) in r.mean.iter().zip(&r.std) {
            row.push(format!("{m:+.4}"));
            row.push(format!("{s:.4}"));
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_differences(rows: &[DifferenceRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let widths: Vec<usize> = first.columns.iter().map(|c| c.len().max(17)).collect();
    let mut header = format!("{:>5}", "n");
    for (c, w) in first.columns.iter().zip(&widths) {
        let _ = write!(header, " | {c:>w$}");
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    for r in rows {
        let _ = write!(out, "{:>5}", r.n_per_class);
        for ((m, s), w) in r.mean.iter().zip(&r.std).zip(&widths) {
            let cell = if r.seeds > 1 {
                format!("{m:+.4} ± {s:.4}")
            } else {
                format!("{m:+.4}")
            };
            let _ = write!(out, " | {cell:>w$}");
        }
        let _ = writeln!(out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: [f64; 4]) -> BoundingBox {
        BoundingBox::from_array(a).unwrap()
    }

    fn rec(logits: Vec<f64>, target: usize, pred: [f64; 4], gt: [f64; 4]) -> PredictionRecord {
        PredictionRecord {
            record_id: "r".into(),
            logits,
            pred_box: pred,
            target,
            target_box: bx(gt),
        }
    }

    #[test]
    fn iou_cases() {
        let b = bx([0.1, 0.2, 0.6, 0.9]);
        assert_eq!(iou(b.to_array(), &b), 1.0);
        assert_eq!(iou([0.0, 0.0, 0.1, 0.1], &bx([0.5, 0.5, 0.9, 0.9])), 0.0);
        assert!((iou([0.0, 0.0, 0.5, 0.5], &bx([0.25, 0.25, 0.75, 0.75])) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou([0.3, 0.3, 0.3, 0.3], &bx([0.5, 0.5, 0.5, 0.5])), 0.0);
        assert_eq!(iou([0.6, 0.6, 0.2, 0.2], &bx([0.1, 0.1, 0.7, 0.7])), 0.0);
    }

    fn with_ious(ious: &[f64]) -> Vec<PredictionRecord> {
        // box [0, 0, s, 1] against [0, 0, 1, 1] has IoU s
        ious.iter().map(|&s| rec(vec![1.0, 0.0], 0, [0.0, 0.0, s, 1.0], [0.0, 0.0, 1.0, 1.0])).collect()
    }

    #[test]
    fn mean_and_localisation_accuracy() {
        assert!((mean_iou(&with_ious(&[1.0, 0.0])).unwrap() - 0.5).abs() < 1e-12);
        let p = with_ious(&[0.6, 0.4, 0.8]);
        assert!((loc_accuracy(&p, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((loc_accuracy(&p, 0.7).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(loc_accuracy(&with_ious(&[0.5]), 0.5).unwrap(), 0.0);
        assert!(matches!(mean_iou(&[]), Err(Error::Contract(_))));
        assert!(matches!(loc_accuracy(&[], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn topn_cases() {
        let g = [0.0, 0.0, 1.0, 1.0];
        let p = vec![
            rec(vec![3.0, 1.0, 2.0], 0, g, g),
            rec(vec![3.0, 1.0, 2.0], 2, g, g),
            rec(vec![3.0, 1.0, 2.0], 1, g, g),
            rec(vec![0.0, 5.0, 2.0], 1, g, g),
        ];
        assert_eq!(topn_accuracy(&p, 1).unwrap(), 0.5);
        assert_eq!(topn_accuracy(&p, 2).unwrap(), 0.75);
        assert_eq!(topn_accuracy(&p, 3).unwrap(), 1.0);
        assert!(matches!(topn_accuracy(&p, 4), Err(Error::Contract(_))));
        let tie = vec![rec(vec![0.0; 4], 0, g, g), rec(vec![0.0; 4], 1, g, g)];
        assert_eq!(topn_accuracy(&tie, 1).unwrap(), 0.5);
    }

    #[test]
    fn report_layout_follows_class_count() {
        let g = [0.0, 0.0, 1.0, 1.0];
        let ctx = |d: &str, m: &str| ReportContext {
            dataset: d.into(),
            method: m.into(),
            n_per_class: 10,
            seed: 0,
        };
        let small = vec![rec(vec![0.0; 5], 0, g, g)];
        let r = build_report(&small, &ctx("TINY", "ssl")).unwrap();
        assert!(r.top5.is_none());
        assert!(!r.to_csv().unwrap().contains("top5"));
        let big = vec![rec(vec![0.0; 20], 0, g, g)];
        let r = build_report(&big, &ctx("FULL", "baseline")).unwrap();
        assert_eq!(r.top5, Some(1.0));
        assert!(r.to_csv().unwrap().starts_with("n,method,top1,top3,top5,mean_iou,acc_iou_05,acc_iou_07"));
        assert!(matches!(build_report(&big, &ctx("", "ssl")), Err(Error::Contract(_))));
        assert!(matches!(build_report(&big, &ctx("FULL", " ")), Err(Error::Contract(_))));
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
