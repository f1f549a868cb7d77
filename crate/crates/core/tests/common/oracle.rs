//! Brute-force reimplementations of the evaluation metrics, written from the
//! definitions rather than from the production sweep.

use rand::Rng as _;
use synthvision_core::evaluation::{evaluate, ClassNames, ConfusionMatrix};
use synthvision_core::manifest::ClassLabel;
use synthvision_core::vit::{Prediction, PredictionSet};
use synthvision_nn::rng;

fn is_pos(p: &Prediction) -> bool {
    p.true_label == ClassLabel::Positive
}

/// Random labelled scores. Scores are drawn from a coarse grid so ties are
/// common; labels from the classifier rule `score > 0.5`.
pub fn random_set(seed: u64) -> PredictionSet {
    let mut r = rng::stream(seed, rng::label("oracle"));
    let n = r.random_range(1..=20);
    let levels = r.random_range(2..12);
    let entries = (0..n)
        .map(|i| {
            let score = r.random_range(0..=levels) as f64 / levels as f64;
            let true_label = if r.random::<f64>() < 0.5 {
                ClassLabel::Positive
            } else {
                ClassLabel::Negative
            };
            Prediction {
                id: format!("x{i}"),
                score,
                predicted_label: if score > 0.5 {
                    ClassLabel::Positive
                } else {
                    ClassLabel::Negative
                },
                true_label,
            }
        })
        .collect();
    PredictionSet { entries }
}

pub fn confusion(preds: &PredictionSet) -> ConfusionMatrix {
    let count = |t: ClassLabel, p: ClassLabel| {
        preds
            .entries
            .iter()
            .filter(|e| e.true_label == t && e.predicted_label == p)
            .count()
    };
    use ClassLabel::{Negative as N, Positive as P};
    ConfusionMatrix::new(count(P, P), count(P, N), count(N, P), count(N, N))
}

fn div(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(precision, recall, f1)` with 0 for every undefined ratio.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    (
        div(tp, tp + fp),
        div(tp, tp + fn_),
        div(2 * tp, 2 * tp + fp + fn_),
    )
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(preds: &PredictionSet) -> Option<f64> {
    let pos: Vec<f64> = preds
        .entries
        .iter()
        .filter(|p| is_pos(p))
        .map(|p| p.score)
        .collect();
    let neg: Vec<f64> = preds
        .entries
        .iter()
        .filter(|p| !is_pos(p))
        .map(|p| p.score)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Step-wise average precision: recompute precision and recall from scratch
/// at every distinct threshold.
pub fn average_precision(preds: &PredictionSet) -> Option<f64> {
    let n_pos = preds.entries.iter().filter(|p| is_pos(p)).count();
    if n_pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = preds.entries.iter().map(|p| p.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let called: Vec<&Prediction> = preds.entries.iter().filter(|p| p.score >= t).collect();
        let tp = called.iter().filter(|p| is_pos(p)).count();
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev) * tp as f64 / called.len() as f64;
        prev = recall;
    }
    Some(ap)
}

/// Largest absolute disagreement between `evaluate` and the oracles.
pub fn max_deviation(preds: &PredictionSet) -> Result<f64, String> {
    let e = evaluate(preds, ClassNames::default()).map_err(|e| e.to_string())?;
    let cm = confusion(preds);
    if e.confusion_matrix != cm {
        return Err(format!("confusion {:?} vs {:?}", e.confusion_matrix, cm));
    }
    let (pp, pr, pf) = prf(cm.tp, cm.fp, cm.fn_);
    let (np, nr, nf) = prf(cm.tn, cm.fn_, cm.fp);
    let n = cm.total() as f64;
    let (ps, ns) = ((cm.tp + cm.fn_) as f64, (cm.tn + cm.fp) as f64);
    let r = &e.report;
    let mut pairs = vec![
        (r.positive.precision, pp),
        (r.positive.recall, pr),
        (r.positive.f1, pf),
        (r.negative.precision, np),
        (r.negative.recall, nr),
        (r.negative.f1, nf),
        (r.accuracy, (cm.tp + cm.tn) as f64 / n),
        (r.macro_avg.precision, (pp + np) / 2.0),
        (r.macro_avg.recall, (pr + nr) / 2.0),
        (r.macro_avg.f1, (pf + nf) / 2.0),
        (r.weighted_avg.precision, (pp * ps + np * ns) / n),
        (r.weighted_avg.recall, (pr * ps + nr * ns) / n),
        (r.weighted_avg.f1, (pf * ps + nf * ns) / n),
        (e.specificity, nr),
        (e.npv, np),
    ];
    match (e.roc_auc, auc(preds)) {
        (Some(a), Some(b)) => pairs.push((a, b)),
        (None, None) => {}
        (a, b) => return Err(format!("auc defined mismatch: {a:?} vs {b:?}")),
    }
    match (e.average_precision, average_precision(preds)) {
        (Some(a), Some(b)) => pairs.push((a, b)),
        (None, None) => {}
        (a, b) => return Err(format!("ap defined mismatch: {a:?} vs {b:?}")),
    }
    Ok(pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Scores that realise a given confusion matrix at the 0.5 cut.
pub fn set_from_matrix(cm: ConfusionMatrix) -> PredictionSet {
    let mut entries = Vec::new();
    let mut push = |n: usize, truth: ClassLabel, score: f64| {
        for _ in 0..n {
            entries.push(Prediction {
                id: format!("e{}", entries.len()),
                score,
                predicted_label: if score > 0.5 {
                    ClassLabel::Positive
                } else {
                    ClassLabel::Negative
                },
                true_label: truth,
            });
        }
    };
    push(cm.tp, ClassLabel::Positive, 0.9);
    push(cm.fn_, ClassLabel::Positive, 0.2);
    push(cm.fp, ClassLabel::Negative, 0.8);
    push(cm.tn, ClassLabel::Negative, 0.1);
    PredictionSet { entries }
}
