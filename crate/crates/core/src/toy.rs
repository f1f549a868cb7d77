//! Procedural stand-in modality and the scripted curation oracle.
//!
//! Images are grayscale skin-like patches: a smooth background with a
//! gradient and sensor noise. Positives carry a raised bright lesion (a
//! bumpy disc), negatives do not. The two classes are separable by eye.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use synthvision_nn::{rng, Tensor};

use crate::curation::{CurationError, CurationService, Decision, DecisionRequest};
use crate::dreambooth::Example;
use crate::imaging::{self, ImageError};
use crate::manifest::{ClassLabel, CurationStatus, ImageRecord, Manifest, ManifestError};

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ToyError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModality {
    /// Side length in pixels.
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` units.
    pub noise: f64,
    /// Lesion radius range as a fraction of `size`.
    pub radius: (f64, f64),
    /// Lesion brightness above the background.
    pub contrast: (f64, f64),
}

impl Default for ToyModality {
    fn default() -> Self {
        Self {
            size: 16,
            noise: 0.03,
            radius: (0.18, 0.3),
            contrast: (0.35, 0.5),
        }
    }
}

impl ToyModality {
    /// One image in `[0, 1]`, shape `[1, size, size]`.
    pub fn render(&self, label: ClassLabel, seed: u64) -> Tensor {
        let s = self.size;
        let mut r = rng::stream(seed, rng::label("toy.render"));
        let base: f64 = r.random_range(0.3..0.45);
        let (gx, gy): (f64, f64) = (r.random_range(-0.08..0.08), r.random_range(-0.08..0.08));
        let lesion = (label == ClassLabel::Positive).then(|| {
            let rad = r.random_range(self.radius.0..self.radius.1);
            let cx = 0.5 + r.random_range(-0.15..0.15);
            let cy = 0.5 + r.random_range(-0.15..0.15);
            let amp = r.random_range(self.contrast.0..self.contrast.1);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            (rad, cx, cy, amp, phase)
        });
        let noise = rng::normal_vec(&mut r, s * s);
        Tensor::from_fn(&[1, s, s], |i| {
            let x = ((i % s) as f64 + 0.5) / s as f64;
            let y = ((i / s) as f64 + 0.5) / s as f64;
            let mut v = base + gx * (x - 0.5) + gy * (y - 0.5);
            if let Some((rad, cx, cy, amp, phase)) = lesion {
                let (dx, dy) = (x - cx, y - cy);
                let d = (dx * dx + dy * dy).sqrt() / rad;
                // Soft-edged disc with a lobed rim.
                let rim = 1.0 + 0.15 * (5.0 * dy.atan2(dx) + phase).sin();
                let inside = 1.0 / (1.0 + ((d - rim) * 8.0).exp());
                v += amp * inside;
            }
            (v + self.noise * noise[i]).clamp(0.0, 1.0)
        })
    }

    /// Captioned base-model training data in `[-1, 1]`: alternating lesion
    /// images captioned `class_prompt` and plain skin captioned `skin_prompt`.
    pub fn base_corpus(
        &self,
        n: usize,
        class_prompt: &str,
        skin_prompt: &str,
        seed: u64,
    ) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let (label, prompt) = if i % 2 == 0 {
                    (ClassLabel::Positive, class_prompt)
                } else {
                    (ClassLabel::Negative, skin_prompt)
                };
                Example {
                    image: imaging::to_signed(&self.render(label, rng::derive(seed, i as u64))),
                    prompt: prompt.to_string(),
                }
            })
            .collect()
    }
}

/// Write `n` positive guide images as `guide_{i}.png` with a `.txt` prompt
/// naming the subject `{identifier} {class_noun}`.
pub fn write_guides(
    toy: &ToyModality,
    dir: &Path,
    n: usize,
    identifier: &str,
    class_noun: &str,
    seed: u64,
) -> Result<()> {
    if n == 0 {
        return Err(ToyError::InvalidArgument(
            "at least one guide image is required".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let seed = rng::derive(seed, rng::label("toy.guides"));
    for i in 0..n {
        let img = toy.render(ClassLabel::Positive, rng::derive(seed, i as u64));
        imaging::save_png(&dir.join(format!("guide_{i:02}.png")), &img)?;
        std::fs::write(
            dir.join(format!("guide_{i:02}.txt")),
            format!("a photo of {identifier} {class_noun}\n"),
        )?;
    }
    Ok(())
}

/// Write `n_positive` + `n_negative` real images under `dir` and return their
/// unassigned manifest (paths relative to `dir`), also saved as `real.jsonl`.
pub fn write_real_images(
    toy: &ToyModality,
    dir: &Path,
    n_positive: usize,
    n_negative: usize,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let seed = rng::derive(seed, rng::label("toy.real"));
    let mut m = Manifest::new();
    let jobs = (0..n_positive)
        .map(|i| (ClassLabel::Positive, i))
        .chain((0..n_negative).map(|i| (ClassLabel::Negative, i)));
    for (k, (label, i)) in jobs.enumerate() {
        let id = format!("real-{label}-{i:04}");
        let rel = format!("{label}/{id}.png");
        imaging::save_png(
            &dir.join(&rel),
            &toy.render(label, rng::derive(seed, k as u64)),
        )?;
        m.push(ImageRecord::real(id, rel, label))?;
    }
    m.write(&dir.join("real.jsonl"))?;
    Ok(m)
}

/// Lesion salience of an image in `[0, 1]`: the mean of the brightest 15% of
/// pixels minus the median, times the fraction of pixels that exceed the
/// median by more than 0.15.
pub fn quality_score(image: &Tensor) -> f64 {
    let mut v: Vec<f64> = image.data().to_vec();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let median = v[v.len() / 2];
    let k = (v.len() * 15).div_ceil(100);
    let top = v[v.len() - k..].iter().sum::<f64>() / k as f64;
    let area = v.iter().filter(|&&x| x > median + 0.15).count() as f64 / v.len() as f64;
    (top - median) * area.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoCurationConfig {
    /// Fraction of candidates rejected, lowest quality first.
    pub reject_fraction: f64,
    pub reviewer: String,
}

impl Default for AutoCurationConfig {
    fn default() -> Self {
        Self {
            reject_fraction: 0.2,
            reviewer: "auto-oracle".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoCurationSummary {
    pub reviewed: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Quality score at or below which images were rejected.
    pub threshold: Option<f64>,
}

/// Decide every pending synthetic: the `ceil(reject_fraction · n)` lowest
/// scores are rejected (ties broken by id), the rest accepted.
pub fn auto_curate(
    service: &mut CurationService,
    config: &AutoCurationConfig,
) -> Result<AutoCurationSummary> {
    if !(0.0..=1.0).contains(&config.reject_fraction) {
        return Err(ToyError::InvalidArgument(format!(
            "reject_fraction {} outside [0, 1]",
            config.reject_fraction
        )));
    }
    let mut scored = Vec::new();
    for rec in service.manifest().records() {
        if service.status(&rec.id) != Some(CurationStatus::Pending) {
            continue;
        }
        let path = service
            .image_path(&rec.id)
            .expect("record is in the manifest");
        scored.push((quality_score(&imaging::load(&path, 1)?), rec.id.clone()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let n_reject = (config.reject_fraction * scored.len() as f64).ceil() as usize;
    for (i, (score, id)) in scored.iter().enumerate() {
        let decision = if i < n_reject {
            Decision::Reject
        } else {
            Decision::Accept
        };
        service.record_decision(DecisionRequest {
            image_id: id.clone(),
            decision,
            reviewer: config.reviewer.clone(),
            note: Some(format!("quality {score:.4}")),
            supersedes: None,
        })?;
    }
    Ok(AutoCurationSummary {
        reviewed: scored.len(),
        accepted: scored.len() - n_reject,
        rejected: n_reject,
        threshold: n_reject.checked_sub(1).map(|i| scored[i].0),
    })
}
