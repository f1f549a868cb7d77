//! Prompt campaigns: seeded synthetic candidates registered as pending.
//!
//! Variant `i` of a template is sampled with seed `template_base + i`, where
//! templates in a campaign take consecutive seed ranges starting at the
//! campaign's `base_seed`. Images land at
//! `{output_dir}/{prompt_id}/{prompt_id}_s{seed}.png` and record paths are
//! relative to `output_dir`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dreambooth::{DiffusionModel, DreamBoothError, Upsampler};
use crate::imaging::{self, ImageError};
use crate::manifest::{ImageRecord, Manifest, ManifestError};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid campaign: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] DreamBoothError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub prompt_id: String,
    pub text: String,
    pub n_variants: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationCampaign {
    pub base_seed: u64,
    pub templates: Vec<PromptTemplate>,
}

/// Allowed `n_variants` range, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantBounds {
    pub min: usize,
    pub max: usize,
}

impl VariantBounds {
    pub const FULL: VariantBounds = VariantBounds { min: 30, max: 50 };
    pub const DESK: VariantBounds = VariantBounds { min: 1, max: 50 };
}

fn valid_prompt_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl PromptTemplate {
    pub fn validate(&self, bounds: VariantBounds) -> Result<(), GenerationError> {
        if !valid_prompt_id(&self.prompt_id) {
            return Err(GenerationError::Invalid(format!(
                "prompt_id `{}` must be non-empty and use only [A-Za-z0-9_-]",
                self.prompt_id
            )));
        }
        if self.text.trim().is_empty() {
            return Err(GenerationError::Invalid(format!(
                "prompt `{}` has empty text",
                self.prompt_id
            )));
        }
        if self.n_variants < bounds.min || self.n_variants > bounds.max {
            return Err(GenerationError::Invalid(format!(
                "prompt `{}` asks for {} variants, allowed {}..={}",
                self.prompt_id, self.n_variants, bounds.min, bounds.max
            )));
        }
        Ok(())
    }
}

impl GenerationCampaign {
    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self, bounds: VariantBounds) -> Result<(), GenerationError> {
        let mut seen = HashSet::new();
        for t in &self.templates {
            if !seen.insert(t.prompt_id.as_str()) {
                return Err(GenerationError::Invalid(format!(
                    "duplicate prompt_id `{}`",
                    t.prompt_id
                )));
            }
            t.validate(bounds)?;
        }
        Ok(())
    }

    pub fn total_variants(&self) -> usize {
        self.templates.iter().map(|t| t.n_variants).sum()
    }

    /// First seed of each template.
    pub fn template_seeds(&self) -> Vec<u64> {
        let mut next = self.base_seed;
        self.templates
            .iter()
            .map(|t| {
                let s = next;
                next += t.n_variants as u64;
                s
            })
            .collect()
    }
}

/// Samples images from a fine-tuned model, optionally refined by an upsampler.
pub struct Generator<'a> {
    pub model: &'a DiffusionModel,
    pub upsampler: Option<&'a Upsampler>,
}

pub fn image_relpath(prompt_id: &str, seed: u64) -> PathBuf {
    PathBuf::from(prompt_id).join(format!("{prompt_id}_s{seed}.png"))
}

pub fn record_id(prompt_id: &str, seed: u64) -> String {
    format!("syn-{prompt_id}-{seed}")
}

impl Generator<'_> {
    /// One image in `[0, 1]` for `(prompt, seed)`.
    pub fn render(
        &self,
        prompt: &str,
        seed: u64,
    ) -> Result<synthvision_nn::Tensor, GenerationError> {
        let img = self.model.sample_one(prompt, seed)?;
        let img = match self.upsampler {
            Some(u) => u.apply(&img),
            None => img,
        };
        Ok(imaging::to_unit(&img))
    }

    /// Generate every variant of `template` with seeds `base_seed..base_seed + n`.
    pub fn run_job(
        &self,
        template: &PromptTemplate,
        base_seed: u64,
        output_dir: &Path,
    ) -> Result<Vec<ImageRecord>, GenerationError> {
        let mut out = Vec::with_capacity(template.n_variants);
        for i in 0..template.n_variants {
            let seed = base_seed + i as u64;
            let rel = image_relpath(&template.prompt_id, seed);
            imaging::save_png(&output_dir.join(&rel), &self.render(&template.text, seed)?)?;
            out.push(ImageRecord::synthetic(
                record_id(&template.prompt_id, seed),
                rel.to_string_lossy().into_owned(),
                template.prompt_id.clone(),
                seed,
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub prompt_id: String,
    pub requested: usize,
    pub generated: usize,
    pub first_seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedJob {
    pub prompt_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub version: String,
    pub base_seed: u64,
    pub requested: usize,
    pub generated: usize,
    pub wall_seconds: f64,
    pub prompts: Vec<PromptReport>,
    pub failed: Vec<FailedJob>,
}

pub struct CampaignOutcome {
    pub manifest: Manifest,
    pub report: CampaignReport,
}

pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const REPORT_FILE: &str = "campaign_report.json";

/// Validate the campaign, then run every template. A failing template is
/// listed in the report and its records are dropped; others are kept. Writes
/// `candidates.jsonl` and `campaign_report.json` into `output_dir`.
pub fn run_campaign(
    generator: &Generator<'_>,
    campaign: &GenerationCampaign,
    bounds: VariantBounds,
    output_dir: &Path,
) -> Result<CampaignOutcome, GenerationError> {
    campaign.validate(bounds)?;
    std::fs::create_dir_all(output_dir)?;
    let started = Instant::now();
    let mut manifest = Manifest::new();
    let mut prompts = Vec::new();
    let mut failed = Vec::new();
    for (template, base) in campaign.templates.iter().zip(campaign.template_seeds()) {
        let t0 = Instant::now();
        match generator.run_job(template, base, output_dir) {
            Ok(records) => {
                let generated = records.len();
                for r in records {
                    manifest.push(r)?;
                }
                prompts.push(PromptReport {
                    prompt_id: template.prompt_id.clone(),
                    requested: template.n_variants,
                    generated,
                    first_seed: base,
                    seconds: t0.elapsed().as_secs_f64(),
                });
                log::info!("generated {generated} images for `{}`", template.prompt_id);
            }
            Err(e) => {
                log::error!("prompt `{}` failed: {e}", template.prompt_id);
                failed.push(FailedJob {
                    prompt_id: template.prompt_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let report = CampaignReport {
        version: crate::VERSION.to_string(),
        base_seed: campaign.base_seed,
        requested: campaign.total_variants(),
        generated: manifest.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
        prompts,
        failed,
    };
    manifest.write(&output_dir.join(CANDIDATES_FILE))?;
    std::fs::write(
        output_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(CampaignOutcome { manifest, report })
}
