//! One PASS/FAIL line per acceptance criterion, each with a pinned tolerance
//! and wall-clock budget. Exits non-zero if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::oracle;
use rand::Rng as _;
use serde_json::{json, Value};
use synthvision_core::curation::{CurationError, CurationService, Decision, DecisionRequest};
use synthvision_core::diffusion::{
    forward_noise, loss_simple, sample, NoiseSchedule, ScheduleKind,
};
use synthvision_core::dreambooth::{
    finetune, prior_preservation_loss, FineTuneConfig, InstanceSet, PriorSet, PromptBatch,
};
use synthvision_core::evaluation::{
    classification_report, report_csv, ClassNames, ConfusionMatrix, REPORT_JSON,
};
use synthvision_core::manifest::{
    build_training_set, BuildError, ClassLabel, CurationStatus, ImageRecord, Manifest, Provenance,
    Split, SplitSpec,
};
use synthvision_core::pipeline::{
    resolve_config, Overrides, PipelineOutcome, Run, Stage, PREDICTIONS_FILE,
};
use synthvision_nn::{rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const METRIC_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const VARIANCE_TOL: f64 = 0.05;
const E2E_MIN_ACCURACY: f64 = 0.90;
const E2E_MIN_AUC: f64 = 0.95;

fn classification_table_regression() -> Outcome {
    let expected = "\
,precision,recall,f1-score,support
HPV,1.00,0.94,0.97,70
Normal,0.95,1.00,0.97,70
accuracy,,,0.97,140
macro avg,0.97,0.97,0.97,140
weighted avg,0.97,0.97,0.97,140
";
    let names = ClassNames {
        positive: "HPV".into(),
        negative: "Normal".into(),
    };
    let got = report_csv(
        &classification_report(&ConfusionMatrix::new(66, 4, 0, 70)),
        &names,
    );
    check!(got == expected, "table differs:\n{got}");
    Ok("tp=66 fn=4 fp=0 tn=70 reproduces every 2-decimal cell".into())
}

fn metric_oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..1000 {
        let preds = oracle::random_set(seed);
        worst = worst.max(oracle::max_deviation(&preds).map_err(|e| format!("seed {seed}: {e}"))?);
    }
    check!(
        worst <= METRIC_TOL,
        "worst deviation {worst:e} > {METRIC_TOL:e}"
    );
    Ok(format!(
        "1000 sets, counts exact, worst |Δ| {worst:e} ≤ {METRIC_TOL:e}"
    ))
}

fn diffusion_invariants() -> Outcome {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for steps in [10, 100, 1000] {
            let s = NoiseSchedule::new(kind, steps).map_err(|e| e.to_string())?;
            check!(
                s.beta().iter().all(|&b| b > 0.0 && b < 1.0),
                "{kind:?} T={steps}: beta out of (0,1)"
            );
            check!(
                s.alpha_bar().windows(2).all(|w| w[1] < w[0]),
                "{kind:?} T={steps}: alpha_bar not decreasing"
            );
        }
    }

    let n = 100_000;
    let mut r = rng::stream(5, 0);
    let x0 = Tensor::randn(&[n], 1.0, &mut r);
    let eps = Tensor::randn(&[n], 1.0, &mut r);
    let mut worst_var = 0.0f64;
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(kind, 1000).unwrap();
        for t in [0, 250, 500, 750, 999] {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let mean = xt.data().iter().sum::<f64>() / n as f64;
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    check!(worst_var < VARIANCE_TOL, "variance off by {worst_var}");

    let m = common::tiny_model(3, 20);
    let cond = m.text.encode(common::INSTANCE_PROMPT);
    let a = sample(&m.denoiser, m.image_shape(), &m.schedule, &cond, 42, 3).unwrap();
    let b = sample(&m.denoiser, m.image_shape(), &m.schedule, &cond, 42, 3).unwrap();
    check!(a == b, "seeded sampling is not reproducible");

    let inst = PromptBatch::all(&common::examples(
        3,
        m.image_shape(),
        common::INSTANCE_PROMPT,
        1,
    ))
    .unwrap();
    let prior = PromptBatch::all(&common::examples(
        2,
        m.image_shape(),
        common::CLASS_PROMPT,
        2,
    ))
    .unwrap();
    for seed in [0, 7, 123] {
        let c = m.text.encode_batch(&inst.prompts);
        let plain = loss_simple(&m.denoiser, &inst.images, &c, &m.schedule, seed).unwrap();
        let zero = prior_preservation_loss(&m, &inst, &prior, 0.0, seed).unwrap();
        check!(
            plain.to_bits() == zero.to_bits(),
            "λ=0 loss {zero} != instance loss {plain}"
        );
    }
    Ok(format!(
        "monotone at T∈{{10,100,1000}}, |var−1| {worst_var:.4} < {VARIANCE_TOL}, sampling bit-exact, λ=0 bit-exact"
    ))
}

fn gradient_checks() -> Outcome {
    let (n_den, den) = common::denoiser_gradcheck();
    let (n_vit, vit) = common::vit_gradcheck();
    check!(n_den <= 1000, "denoiser has {n_den} parameters");
    check!(den < GRAD_TOL, "denoiser worst relative error {den:e}");
    check!(vit < GRAD_TOL, "ViT worst relative error {vit:e}");
    Ok(format!(
        "denoiser ({n_den} params) {den:.1e}, ViT ({n_vit} params) {vit:.1e}, both < {GRAD_TOL:e}"
    ))
}

fn checkpoint_cadence() -> Outcome {
    let base = common::tiny_model(0, 10);
    let shape = base.image_shape();
    let inst = InstanceSet::new(
        "sks",
        common::examples(3, shape, common::INSTANCE_PROMPT, 0),
    )
    .unwrap();
    let mut prior = PriorSet::empty(common::CLASS_PROMPT);
    prior.examples = common::examples(4, shape, common::CLASS_PROMPT, 1);
    prior.seeds = vec![0; 4];
    let cfg = FineTuneConfig {
        resolution: shape[1],
        ..FineTuneConfig::default()
    };
    check!(
        (cfg.unet_steps, cfg.checkpoint_every) == (2000, 500),
        "defaults are {}/{}",
        cfg.unet_steps,
        cfg.checkpoint_every
    );
    let dir = tempfile::tempdir().unwrap();
    let out = finetune(&cfg, &inst, &prior, &base, dir.path()).map_err(|e| e.to_string())?;
    let steps: Vec<usize> = out.checkpoints.iter().map(|(s, _)| *s).collect();
    check!(steps == [500, 1000, 1500, 2000], "checkpoints at {steps:?}");
    for s in &steps {
        let p = dir.path().join(format!("ckpt_step{s}.bin"));
        check!(p.exists(), "{} missing", p.display());
    }
    Ok(format!("checkpoints at {steps:?}"))
}

fn decide(
    svc: &mut CurationService,
    id: &str,
    d: Decision,
    sup: Option<String>,
) -> Result<(), CurationError> {
    svc.record_decision(DecisionRequest {
        image_id: id.into(),
        decision: d,
        reviewer: "acceptance".into(),
        note: None,
        supersedes: sup,
    })
    .map(|_| ())
}

fn synthetic_manifest(prompts: usize, per_prompt: usize) -> Manifest {
    Manifest::from_records((0..prompts).flat_map(|p| {
        (0..per_prompt).map(move |s| {
            let id = format!("p{:02}-{s:03}", p + 1);
            ImageRecord::synthetic(
                id.clone(),
                format!("{id}.png"),
                format!("p{:02}", p + 1),
                s as u64,
            )
        })
    }))
    .unwrap()
}

fn curation_event_sourcing() -> Outcome {
    let m = synthetic_manifest(2, 5);
    let ids: Vec<String> = m.records().iter().map(|r| r.id.clone()).collect();
    let sequences = 300;
    for seq in 0..sequences {
        let mut r = rng::stream(seq, rng::label("acceptance.curation"));
        let mut svc = CurationService::new(m.clone(), ".");
        for _ in 0..r.random_range(0..40) {
            let id = &ids[r.random_range(0..ids.len())];
            let d = if r.random::<bool>() {
                Decision::Accept
            } else {
                Decision::Reject
            };
            let latest = svc
                .log()
                .iter()
                .rev()
                .find(|x| &x.image_id == id)
                .map(|x| x.id.clone());
            let sup = match r.random_range(0..3) {
                0 => None,
                1 => latest,
                _ => Some("dec-999999".into()),
            };
            let _ = decide(&mut svc, id, d, sup);
        }
        let replayed = CurationService::replay(m.clone(), svc.log()).map_err(|e| e.to_string())?;
        check!(
            replayed.effective_manifest() == svc.effective_manifest(),
            "sequence {seq}: replay diverges"
        );
    }

    let mut svc = CurationService::new(synthetic_manifest(18, 35), ".");
    let mut k = 0;
    while let Some(rec) = svc.next_pending(None) {
        let d = if k < 130 {
            Decision::Reject
        } else {
            Decision::Accept
        };
        decide(&mut svc, &rec.id, d, None).map_err(|e| e.to_string())?;
        k += 1;
    }
    check!(k == 630, "reviewed {k}");
    let ok = svc.finalize(500).map_err(|e| e.to_string())?;
    check!(ok.len() == 500, "finalize(500) returned {}", ok.len());
    match svc.finalize(600) {
        Err(CurationError::Shortfall { shortfall: 100, .. }) => {}
        other => return Err(format!("finalize(600) gave {other:?}")),
    }
    Ok(format!(
        "{sequences} random logs replay exactly; 630 → 130 rejected → 500 ok, 600 short by 100"
    ))
}

fn run_desk(root: &Path) -> Result<(Value, Vec<u8>, Vec<u8>), String> {
    let file = json!({"data_root": root.join("data"), "run_dir": root.join("run")});
    let cfg = resolve_config(Some(&file), &Overrides::default()).map_err(|e| e.to_string())?;
    let mut run = Run::open(cfg.clone()).map_err(|e| e.to_string())?;
    match run.run_all(false).map_err(|e| e.to_string())? {
        PipelineOutcome::Completed { .. } => {}
        other => return Err(format!("pipeline stopped early: {other:?}")),
    }
    let eval_dir = cfg.stage_dir(Stage::Evaluate);
    let report = std::fs::read(eval_dir.join(REPORT_JSON)).map_err(|e| e.to_string())?;
    let preds = std::fs::read(eval_dir.join(PREDICTIONS_FILE)).map_err(|e| e.to_string())?;
    let counts = json!({
        "guides": std::fs::read_dir(cfg.data_path(&cfg.data.guides)).map_err(|e| e.to_string())?
            .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png")))
            .count(),
        "candidates": Manifest::load(&cfg.stage_dir(Stage::Generate).join("candidates.jsonl"))
            .map_err(|e| e.to_string())?
            .len(),
        "curate": run.state().summary(Stage::Curate).cloned(),
        "spec": cfg.dataset,
    });
    Ok((counts, report, preds))
}

fn toy_end_to_end() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (counts, report, preds) = run_desk(a.path())?;
    let eval: Value = serde_json::from_slice(&report).map_err(|e| e.to_string())?;
    let acc = eval["report"]["accuracy"].as_f64().unwrap_or(f64::NAN);
    let auc = eval["roc_auc"].as_f64().unwrap_or(f64::NAN);
    let candidates = counts["candidates"].as_u64().unwrap_or(0);
    let rejected = counts["curate"]["auto"]["rejected"].as_u64().unwrap_or(0);
    let reject_rate = rejected as f64 / candidates.max(1) as f64;
    check!(counts["guides"] == 10, "guides: {}", counts["guides"]);
    check!(candidates >= 60, "only {candidates} candidates");
    check!(
        (0.15..=0.25).contains(&reject_rate),
        "auto-curation rejected {reject_rate:.3}"
    );
    check!(acc >= E2E_MIN_ACCURACY, "test accuracy {acc}");
    check!(auc >= E2E_MIN_AUC, "test AUC {auc}");

    let (_, report2, preds2) = run_desk(b.path())?;
    check!(
        report == report2 && preds == preds2,
        "rerun with the same seed changed the report"
    );
    Ok(format!(
        "10 guides, {candidates} candidates, {rejected} rejected ({:.0}%), split {}, accuracy {acc:.3} ≥ {E2E_MIN_ACCURACY}, AUC {auc:.3} ≥ {E2E_MIN_AUC}, rerun identical",
        reject_rate * 100.0,
        counts["spec"]
    ))
}

fn dataset_gate() -> Outcome {
    let cases = 2000;
    let mut built_ok = 0;
    for case in 0..cases {
        let mut r = rng::stream(case, rng::label("acceptance.gate"));
        let mut recs = Vec::new();
        for i in 0..r.random_range(0..25) {
            let mut rec = ImageRecord::synthetic(format!("s{i}"), format!("s/{i}.png"), "p01", i);
            rec.curation_status = match r.random_range(0..3) {
                0 => CurationStatus::Pending,
                1 => CurationStatus::Accepted,
                _ => CurationStatus::Rejected,
            };
            recs.push(rec);
        }
        for i in 0..r.random_range(0..12) {
            let label = if r.random::<bool>() {
                ClassLabel::Positive
            } else {
                ClassLabel::Negative
            };
            recs.push(ImageRecord::real(
                format!("r{i}"),
                format!("r/{i}.png"),
                label,
            ));
        }
        let leak = r.random_range(0..10) == 0
            && recs.iter().any(|x| x.provenance == Provenance::Synthetic);
        if leak {
            recs[0].split = if r.random::<bool>() {
                Split::Val
            } else {
                Split::Test
            };
        }
        let spec = SplitSpec {
            train_pos: r.random_range(0..8),
            train_neg: r.random_range(0..4),
            val_pos: r.random_range(0..3),
            val_neg: r.random_range(0..3),
            test_pos: r.random_range(0..3),
            test_neg: r.random_range(0..3),
        };
        let m = Manifest::from_records(recs).unwrap();
        match build_training_set(&m, &spec, case) {
            Ok(built) => {
                check!(!leak, "case {case}: synthetic eval record was admitted");
                built_ok += 1;
                for rec in built
                    .records()
                    .iter()
                    .filter(|x| x.provenance == Provenance::Synthetic)
                {
                    match rec.split {
                        Split::Train => check!(
                            rec.curation_status == CurationStatus::Accepted,
                            "case {case}: {} ({}) in train",
                            rec.id,
                            rec.curation_status
                        ),
                        Split::Val | Split::Test => {
                            return Err(format!(
                                "case {case}: synthetic {} in {}",
                                rec.id, rec.split
                            ))
                        }
                        Split::Unassigned => {}
                    }
                }
            }
            Err(BuildError::CrossSplitLeak(_)) if leak => {}
            Err(e) => check!(!leak, "case {case}: leak reported as {e}"),
        }
    }
    Ok(format!("{cases} random manifests ({built_ok} built) admit only accepted synthetics, none in val/test"))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 8] = [
    Criterion {
        name: "classification-report regression",
        budget: Duration::from_secs(1),
        run: classification_table_regression,
    },
    Criterion {
        name: "metric oracle equivalence",
        budget: Duration::from_secs(30),
        run: metric_oracle_equivalence,
    },
    Criterion {
        name: "diffusion invariants",
        budget: Duration::from_secs(60),
        run: diffusion_invariants,
    },
    Criterion {
        name: "gradient checks",
        budget: Duration::from_secs(120),
        run: gradient_checks,
    },
    Criterion {
        name: "checkpoint cadence",
        budget: Duration::from_secs(60),
        run: checkpoint_cadence,
    },
    Criterion {
        name: "curation event-sourcing",
        budget: Duration::from_secs(10),
        run: curation_event_sourcing,
    },
    Criterion {
        name: "toy end-to-end",
        budget: Duration::from_secs(15 * 60),
        run: toy_end_to_end,
    },
    Criterion {
        name: "dataset gate",
        budget: Duration::from_secs(30),
        run: dataset_gate,
    },
];

fn main() {
    let mut failed = 0;
    for c in &CRITERIA {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run));
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(Ok(d)) if took <= c.budget => (true, d),
            Ok(Ok(d)) => (false, format!("{d}; over budget")),
            Ok(Err(e)) => (false, e),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        failed += usize::from(!pass);
        println!(
            "{} {} [{:.2}s / {}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        CRITERIA.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
