use synthvision_core::curation::CurationService;
use synthvision_core::imaging;
use synthvision_core::manifest::{ClassLabel, CurationStatus, ImageRecord, Manifest};
use synthvision_core::toy::{
    auto_curate, quality_score, write_guides, write_real_images, AutoCurationConfig, ToyModality,
};
use synthvision_nn::Tensor;

#[test]
fn renders_are_seeded_and_in_range() {
    let toy = ToyModality::default();
    let a = toy.render(ClassLabel::Positive, 3);
    assert_eq!(a, toy.render(ClassLabel::Positive, 3));
    assert_ne!(a, toy.render(ClassLabel::Positive, 4));
    assert_eq!(a.shape(), &[1, 16, 16]);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn quality_score_tracks_lesion_salience() {
    assert_eq!(quality_score(&Tensor::full(&[1, 8, 8], 0.4)), 0.0);
    let spot = Tensor::from_fn(&[1, 10, 10], |i| {
        if i % 10 >= 4 && i % 10 < 7 && (30..70).contains(&i) {
            0.9
        } else {
            0.2
        }
    });
    // 12 of 100 pixels at 0.9 on 0.2: top-15 mean 0.76, area 0.12.
    assert!((quality_score(&spot) - 0.56 * 0.12f64.sqrt()).abs() < 1e-12);

    let toy = ToyModality::default();
    let mean = |label| {
        (0..40)
            .map(|s| quality_score(&toy.render(label, s)))
            .sum::<f64>()
            / 40.0
    };
    assert!(mean(ClassLabel::Positive) > 2.0 * mean(ClassLabel::Negative));
}

fn candidates(dir: &std::path::Path, n: usize) -> Manifest {
    let toy = ToyModality::default();
    let mut m = Manifest::new();
    for i in 0..n {
        let label = if i % 3 == 0 {
            ClassLabel::Negative
        } else {
            ClassLabel::Positive
        };
        let rel = format!("c{i:03}.png");
        imaging::save_png(&dir.join(&rel), &toy.render(label, i as u64)).unwrap();
        m.push(ImageRecord::synthetic(
            format!("c{i:03}"),
            rel,
            "d1",
            i as u64,
        ))
        .unwrap();
    }
    m
}

#[test]
fn auto_curation_rejects_the_lowest_fifth_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = CurationService::new(candidates(dir.path(), 21), dir.path());
    let summary = auto_curate(&mut svc, &AutoCurationConfig::default()).unwrap();
    assert_eq!(
        (summary.reviewed, summary.rejected, summary.accepted),
        (21, 5, 16)
    );
    assert_eq!(svc.log().len(), 21);
    let s = svc.state();
    assert_eq!((s.pending, s.accepted, s.rejected), (0, 16, 5));

    let threshold = summary.threshold.unwrap();
    for r in svc.effective_manifest().records() {
        let q = quality_score(&imaging::load(&dir.path().join(&r.path), 1).unwrap());
        if r.curation_status == CurationStatus::Accepted {
            assert!(q >= threshold, "{} accepted below threshold", r.id);
        } else {
            assert!(q <= threshold, "{} rejected above threshold", r.id);
        }
    }
    // Every i % 3 == 0 candidate is a blank patch of skin; they rank lowest.
    let rejected: Vec<String> = svc
        .effective_manifest()
        .records()
        .iter()
        .filter(|r| r.curation_status == CurationStatus::Rejected)
        .map(|r| r.id.clone())
        .collect();
    assert!(
        rejected
            .iter()
            .all(|id| id[1..].parse::<usize>().unwrap() % 3 == 0),
        "{rejected:?}"
    );

    let again = auto_curate(&mut svc, &AutoCurationConfig::default()).unwrap();
    assert_eq!((again.reviewed, again.rejected), (0, 0));
    assert_eq!(svc.log().len(), 21);
}

#[test]
fn auto_curation_validates_the_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = CurationService::new(candidates(dir.path(), 2), dir.path());
    let bad = AutoCurationConfig {
        reject_fraction: 1.5,
        ..AutoCurationConfig::default()
    };
    assert!(auto_curate(&mut svc, &bad).is_err());
    assert!(svc.log().is_empty());
}

#[test]
fn toy_data_layout_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let toy = ToyModality::default();
    write_guides(&toy, &dir.path().join("guides"), 3, "sks", "wart", 0).unwrap();
    for i in 0..3 {
        assert!(dir.path().join(format!("guides/guide_{i:02}.png")).exists());
        let prompt =
            std::fs::read_to_string(dir.path().join(format!("guides/guide_{i:02}.txt"))).unwrap();
        assert_eq!(prompt.trim(), "a photo of sks wart");
    }
    assert!(write_guides(&toy, dir.path(), 0, "sks", "wart", 0).is_err());

    let real = write_real_images(&toy, &dir.path().join("real"), 2, 3, 0).unwrap();
    assert_eq!(real.len(), 5);
    assert_eq!(
        Manifest::load(&dir.path().join("real/real.jsonl")).unwrap(),
        real
    );
    real.validate_paths(&dir.path().join("real")).unwrap();
    assert_eq!(
        real.records()
            .iter()
            .filter(|r| r.class_label == ClassLabel::Positive)
            .count(),
        2
    );
}
