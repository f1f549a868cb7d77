mod common;

use common::oracle;
use proptest::prelude::*;
use synthvision_core::evaluation::{
    classification_report, evaluate, render_report, report_csv, roc_csv, ClassNames,
    ConfusionMatrix, EvalError, REPORT_CSV, REPORT_JSON, ROC_CSV,
};
use synthvision_core::vit::PredictionSet;

/// Expected classification table for 66 true positives, 4 false negatives,
/// no false positives and 70 true negatives.
const REFERENCE_TABLE: &str = "\
,precision,recall,f1-score,support
HPV,1.00,0.94,0.97,70
Normal,0.95,1.00,0.97,70
accuracy,,,0.97,140
macro avg,0.97,0.97,0.97,140
weighted avg,0.97,0.97,0.97,140
";

fn hpv_names() -> ClassNames {
    ClassNames {
        positive: "HPV".into(),
        negative: "Normal".into(),
    }
}

#[test]
fn fixture_confusion_matrix_reproduces_the_table() {
    let cm = ConfusionMatrix::new(66, 4, 0, 70);
    let report = classification_report(&cm);
    assert_eq!(report_csv(&report, &hpv_names()), REFERENCE_TABLE);
    assert!(report.warnings.is_empty());

    let eval = evaluate(&oracle::set_from_matrix(cm), hpv_names()).unwrap();
    assert_eq!(eval.confusion_matrix, cm);
    assert_eq!(eval.specificity, 1.0);
    assert!((eval.npv - 70.0 / 74.0).abs() < 1e-15);
    assert!((eval.report.accuracy - 136.0 / 140.0).abs() < 1e-15);
}

#[test]
fn oracle_agreement_on_1000_random_sets() {
    let mut worst = 0.0f64;
    for seed in 0..1000 {
        let preds = oracle::random_set(seed);
        let dev = oracle::max_deviation(&preds).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        worst = worst.max(dev);
    }
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}

proptest! {
    #[test]
    fn roc_is_monotone_and_spans_the_square(seed in any::<u64>()) {
        let preds = oracle::random_set(seed);
        let Ok(eval) = evaluate(&preds, ClassNames::default()) else { return Ok(()) };
        let Some(roc) = eval.roc else { return Ok(()) };
        let first = roc.points.first().unwrap();
        let last = roc.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr, first.threshold), (0.0, 0.0, None));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        let csv = roc_csv(&roc);
        prop_assert!(csv.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
        prop_assert_eq!(csv.lines().count(), roc.points.len() + 1);
    }
}

#[test]
fn undefined_metrics_are_reported_not_invented() {
    assert!(matches!(
        evaluate(&PredictionSet::default(), ClassNames::default()),
        Err(EvalError::Empty)
    ));
    let only_neg = oracle::set_from_matrix(ConfusionMatrix::new(0, 0, 2, 3));
    let eval = evaluate(&only_neg, ClassNames::default()).unwrap();
    assert!(eval.roc_auc.is_none() && eval.average_precision.is_none() && eval.roc.is_none());
    assert!(!eval.report.warnings.is_empty());
}

#[test]
fn rendered_report_is_deterministic() {
    let preds = oracle::random_set(17);
    let eval = evaluate(&preds, hpv_names()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    render_report(&eval, a.path()).unwrap();
    render_report(&eval, b.path()).unwrap();
    for f in [REPORT_JSON, REPORT_CSV, ROC_CSV] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(json["class_names"]["positive"], "HPV");
    assert!(json["confusion_matrix"]["fn"].is_u64());
    assert_eq!(
        json["derived_metrics"],
        serde_json::json!(["specificity", "npv"])
    );
}
