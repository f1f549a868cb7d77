//! Binary classification metrics and report files.
//!
//! Conventions: a ratio whose denominator is zero is reported as 0 and flagged
//! in `warnings`. Tied scores form a single threshold step, which gives tied
//! positive/negative pairs half credit in the AUC.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::manifest::ClassLabel;
use crate::vit::PredictionSet;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction set is empty")]
    Empty,
    #[error("ROC needs both classes among true labels")]
    SingleClass,
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fn_: usize, fp: usize, tn: usize) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

pub fn confusion_matrix(preds: &PredictionSet) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for p in &preds.entries {
        match (p.true_label, p.predicted_label) {
            (ClassLabel::Positive, ClassLabel::Positive) => cm.tp += 1,
            (ClassLabel::Positive, ClassLabel::Negative) => cm.fn_ += 1,
            (ClassLabel::Negative, ClassLabel::Positive) => cm.fp += 1,
            (ClassLabel::Negative, ClassLabel::Negative) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    /// Cells whose denominator was zero (reported as 0).
    pub warnings: Vec<String>,
}

fn ratio(num: usize, den: usize, what: &str, warnings: &mut Vec<String>) -> f64 {
    if den == 0 {
        warnings.push(format!(
            "{what} is undefined (zero denominator); reported as 0"
        ));
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64, what: &str, warnings: &mut Vec<String>) -> f64 {
    if p + r == 0.0 {
        warnings.push(format!(
            "{what} is undefined (precision + recall = 0); reported as 0"
        ));
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn classification_report(cm: &ConfusionMatrix) -> ClassReport {
    let mut w = Vec::new();
    let pp = ratio(cm.tp, cm.tp + cm.fp, "positive precision", &mut w);
    let pr = ratio(cm.tp, cm.tp + cm.fn_, "positive recall", &mut w);
    let pf = f1(pp, pr, "positive f1", &mut w);
    let np = ratio(cm.tn, cm.tn + cm.fn_, "negative precision", &mut w);
    let nr = ratio(cm.tn, cm.tn + cm.fp, "negative recall", &mut w);
    let nf = f1(np, nr, "negative f1", &mut w);
    let positive = ClassMetrics {
        precision: pp,
        recall: pr,
        f1: pf,
        support: cm.tp + cm.fn_,
    };
    let negative = ClassMetrics {
        precision: np,
        recall: nr,
        f1: nf,
        support: cm.tn + cm.fp,
    };
    let total = cm.total();
    let accuracy = ratio(cm.tp + cm.tn, total, "accuracy", &mut w);
    let macro_avg = ClassMetrics {
        precision: (pp + np) / 2.0,
        recall: (pr + nr) / 2.0,
        f1: (pf + nf) / 2.0,
        support: total,
    };
    let weighted = |a: f64, b: f64| {
        if total == 0 {
            0.0
        } else {
            (a * positive.support as f64 + b * negative.support as f64) / total as f64
        }
    };
    let weighted_avg = ClassMetrics {
        precision: weighted(pp, np),
        recall: weighted(pr, nr),
        f1: weighted(pf, nf),
        support: total,
    };
    ClassReport {
        positive,
        negative,
        accuracy,
        macro_avg,
        weighted_avg,
        warnings: w,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Score threshold (`score >= threshold` is called positive); `None` for
    /// the initial point above every score.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Cumulative `(threshold, tp, fp)` at each distinct score, descending.
fn sweep(preds: &PredictionSet) -> Vec<(f64, usize, usize)> {
    let mut scored: Vec<(f64, bool)> = preds
        .entries
        .iter()
        .map(|p| (p.score, p.true_label == ClassLabel::Positive))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &(s, pos)) in scored.iter().enumerate() {
        if pos {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == scored.len() || scored[i + 1].0 != s {
            out.push((s, tp, fp));
        }
    }
    out
}

pub fn roc_curve(preds: &PredictionSet) -> Result<RocCurve> {
    let n_pos = preds
        .entries
        .iter()
        .filter(|p| p.true_label == ClassLabel::Positive)
        .count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut points = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for (thr, tp, fp) in sweep(preds) {
        points.push(RocPoint {
            threshold: Some(thr),
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// `Σ (recall_k − recall_{k−1}) · precision_k` over the descending sweep.
pub fn average_precision(preds: &PredictionSet) -> Result<f64> {
    let n_pos = preds
        .entries
        .iter()
        .filter(|p| p.true_label == ClassLabel::Positive)
        .count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in sweep(preds) {
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassNames {
    pub positive: String,
    pub negative: String,
}

impl Default for ClassNames {
    fn default() -> Self {
        Self {
            positive: "positive".into(),
            negative: "negative".into(),
        }
    }
}

/// Every number in `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub class_names: ClassNames,
    pub n: usize,
    pub confusion_matrix: ConfusionMatrix,
    pub report: ClassReport,
    /// `tn / (tn + fp)`; derived from the confusion matrix.
    pub specificity: f64,
    /// `tn / (tn + fn)`; derived from the confusion matrix.
    pub npv: f64,
    pub derived_metrics: Vec<String>,
    pub roc_auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub roc: Option<RocCurve>,
}

/// Compute every metric; curve metrics are `None` when undefined for the input.
pub fn evaluate(preds: &PredictionSet, class_names: ClassNames) -> Result<Evaluation> {
    let cm = confusion_matrix(preds)?;
    let report = classification_report(&cm);
    let roc = roc_curve(preds).ok();
    Ok(Evaluation {
        class_names,
        n: preds.len(),
        confusion_matrix: cm,
        specificity: report.negative.recall,
        npv: report.negative.precision,
        derived_metrics: vec!["specificity".into(), "npv".into()],
        roc_auc: roc.as_ref().map(|r| r.auc),
        average_precision: average_precision(preds).ok(),
        roc,
        report,
    })
}

/// The classification table with 2-decimal cells.
pub fn report_csv(report: &ClassReport, names: &ClassNames) -> String {
    let mut s = String::from(",precision,recall,f1-score,support\n");
    let row = |s: &mut String, name: &str, m: &ClassMetrics| {
        let _ = writeln!(
            s,
            "{name},{:.2},{:.2},{:.2},{}",
            m.precision, m.recall, m.f1, m.support
        );
    };
    row(&mut s, &names.positive, &report.positive);
    row(&mut s, &names.negative, &report.negative);
    let _ = writeln!(
        s,
        "accuracy,,,{:.2},{}",
        report.accuracy, report.macro_avg.support
    );
    row(&mut s, "macro avg", &report.macro_avg);
    row(&mut s, "weighted avg", &report.weighted_avg);
    s
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        let thr = p
            .threshold
            .map_or_else(|| "inf".to_string(), |t| t.to_string());
        let _ = writeln!(s, "{thr},{},{}", p.fpr, p.tpr);
    }
    s
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ROC_CSV: &str = "roc_points.csv";

/// Write `report.json`, `report.csv` and (when defined) `roc_points.csv`.
pub fn render_report(eval: &Evaluation, output_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(output_dir)?;
    let mut json = serde_json::to_string_pretty(eval)?;
    json.push('\n');
    std::fs::write(output_dir.join(REPORT_JSON), json)?;
    std::fs::write(
        output_dir.join(REPORT_CSV),
        report_csv(&eval.report, &eval.class_names),
    )?;
    if let Some(roc) = &eval.roc {
        std::fs::write(output_dir.join(ROC_CSV), roc_csv(roc))?;
    }
    Ok(())
}
