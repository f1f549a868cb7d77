//! Stage orchestration over a run directory.
//!
//! A run directory holds one sub-directory per stage, `config.json` (the
//! resolved config of the latest command), `stages.json` (completed stages)
//! and a `.lock` file while a command is active. Stages run in the order of
//! [`Stage::ALL`]; a completed stage is never silently recomputed.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use synthvision_nn::optim::OptimizerKind;
use synthvision_nn::rng;

use crate::curation::{self, CurationService};
use crate::diffusion::{
    DenoiserConfig, DenoiserParams, NoiseSchedule, ScheduleConfig, ScheduleKind,
};
use crate::dreambooth::superres::{superres_finetune, SuperResConfig, Upsampler};
use crate::dreambooth::text::{tokenize, TextEncoder, TextEncoderConfig};
use crate::dreambooth::{
    build_prior_set, finetune, load_captioned, pretrain_base, DiffusionModel, FineTuneConfig,
    InstanceSet, PretrainConfig,
};
use crate::evaluation::{self, ClassNames};
use crate::generation::{self, GenerationCampaign, Generator, PromptTemplate, VariantBounds};
use crate::imaging;
use crate::manifest::{self, Manifest, Split, SplitSpec};
use crate::toy::{self, AutoCurationConfig, ToyModality};
use crate::vit::{self, TrainConfig, ViTConfig};

pub const DATA_ROOT_ENV: &str = "SYNTHVISION_DATA_ROOT";
pub const STATE_FILE: &str = "stages.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Bad configuration or missing inputs; maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{0}` already completed in this run directory (pass --overwrite to redo it)")]
    AlreadyExists(Stage),
    #[error("stage `{stage}` needs `{missing}` to be completed first")]
    Prerequisite { stage: Stage, missing: Stage },
    #[error(
        "run directory {0} is locked by another command (remove the lock file if it is stale)"
    )]
    Locked(PathBuf),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::AlreadyExists(_) | Self::Prerequisite { .. }
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn stage_err(stage: Stage) -> impl FnOnce(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

trait StageResult<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: std::fmt::Display> StageResult<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| stage_err(stage)(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Base,
    Finetune,
    Generate,
    Curate,
    BuildDataset,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::Base,
        Stage::Finetune,
        Stage::Generate,
        Stage::Curate,
        Stage::BuildDataset,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Base => "base",
            Stage::Finetune => "finetune",
            Stage::Generate => "generate",
            Stage::Curate => "curate",
            Stage::BuildDataset => "build_dataset",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }

    fn previous(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self).unwrap();
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(format!(
                "unknown profile `{other}` (expected paper or desk)"
            )),
        }
    }
}

/// Procedural inputs written by the `prepare` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyData {
    pub modality: ToyModality,
    pub guides: usize,
    pub real_positive: usize,
    pub real_negative: usize,
    pub corpus: usize,
    pub class_noun: String,
    pub skin_prompt: String,
}

/// Input locations, relative to `data_root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Guide images with same-stem `.txt` prompts.
    pub guides: PathBuf,
    /// Manifest of real images (paths relative to the manifest).
    pub real_manifest: PathBuf,
    /// Captioned images for training the base model; unused with `base.checkpoint`.
    pub corpus: PathBuf,
    pub toy: Option<ToyData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelConfig {
    /// Existing base model; when absent one is trained on `data.corpus`.
    pub checkpoint: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub channels: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub text: TextEncoderConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperResStage {
    pub enabled: bool,
    pub factor: usize,
    pub config: SuperResConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    pub host: String,
    pub port: u16,
    /// Scripted reviewer; when absent the pipeline pauses for human review.
    pub auto: Option<AutoCurationConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub class_names: ClassNames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub base: BaseModelConfig,
    pub finetune: FineTuneConfig,
    pub superres: SuperResStage,
    pub campaign: GenerationCampaign,
    pub curation: CurationConfig,
    pub dataset: SplitSpec,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
}

const BODY_SITES: [&str; 18] = [
    "hand",
    "finger",
    "thumb",
    "palm",
    "back of the hand",
    "knuckle",
    "wrist",
    "forearm",
    "elbow",
    "knee",
    "shin",
    "ankle",
    "heel",
    "sole of the foot",
    "toe",
    "face",
    "chin",
    "neck",
];

impl PipelineConfig {
    /// Full-scale run: 512-pixel RGB fine-tuning, ViT-Base and 1240 images.
    /// Needs real data and a large compute budget.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            data_root: "data".into(),
            run_dir: "runs/paper".into(),
            seed: 0,
            data: DataConfig {
                guides: "guides".into(),
                real_manifest: "real/real.jsonl".into(),
                corpus: "corpus".into(),
                toy: None,
            },
            base: BaseModelConfig {
                checkpoint: None,
                schedule: ScheduleConfig {
                    kind: ScheduleKind::Linear,
                    steps: 1000,
                },
                channels: 3,
                base_channels: 64,
                time_dim: 128,
                emb_dim: 256,
                text: TextEncoderConfig {
                    embed_dim: 64,
                    cond_dim: 64,
                },
                pretrain: PretrainConfig::default(),
            },
            finetune: FineTuneConfig::default(),
            superres: SuperResStage {
                enabled: true,
                factor: 2,
                config: SuperResConfig::default(),
            },
            campaign: GenerationCampaign {
                base_seed: 0,
                templates: BODY_SITES
                    .iter()
                    .enumerate()
                    .map(|(i, site)| PromptTemplate {
                        prompt_id: format!("p{:02}", i + 1),
                        text: format!("a photo of sks wart on the {site}"),
                        n_variants: 35,
                    })
                    .collect(),
            },
            curation: CurationConfig {
                host: "127.0.0.1".into(),
                port: 8765,
                auto: None,
            },
            dataset: SplitSpec::FULL,
            vit: ViTConfig::default(),
            train: TrainConfig::default(),
            evaluation: EvaluationConfig {
                class_names: ClassNames {
                    positive: "HPV".into(),
                    negative: "Normal".into(),
                },
            },
        }
    }

    /// CPU-scale run on the procedural modality with scripted curation.
    pub fn desk() -> Self {
        let texts = [
            "a photo of sks wart",
            "a close photo of sks wart",
            "sks wart on skin",
            "a photo of sks wart lesion",
        ];
        Self {
            profile: Profile::Desk,
            data_root: "data".into(),
            run_dir: "runs/desk".into(),
            seed: 0,
            data: DataConfig {
                toy: Some(ToyData {
                    modality: ToyModality::default(),
                    guides: 10,
                    real_positive: 30,
                    real_negative: 70,
                    corpus: 200,
                    class_noun: "wart".into(),
                    skin_prompt: "a photo of skin".into(),
                }),
                ..Self::paper().data
            },
            base: BaseModelConfig {
                checkpoint: None,
                schedule: ScheduleConfig {
                    kind: ScheduleKind::Linear,
                    steps: 100,
                },
                channels: 1,
                base_channels: 8,
                time_dim: 16,
                emb_dim: 16,
                text: TextEncoderConfig {
                    embed_dim: 8,
                    cond_dim: 8,
                },
                pretrain: PretrainConfig::default(),
            },
            finetune: FineTuneConfig {
                unet_steps: 400,
                unet_lr: 5e-4,
                text_steps: 100,
                text_lr: 1e-4,
                resolution: 16,
                checkpoint_every: 200,
                prior_set_size: 20,
                batch_size: 4,
                optimizer: OptimizerKind::Adam,
                ..FineTuneConfig::default()
            },
            superres: SuperResStage {
                enabled: false,
                factor: 2,
                config: SuperResConfig::default(),
            },
            campaign: GenerationCampaign {
                base_seed: 1000,
                templates: texts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| PromptTemplate {
                        prompt_id: format!("d{}", i + 1),
                        text: (*t).into(),
                        n_variants: 16,
                    })
                    .collect(),
            },
            curation: CurationConfig {
                auto: Some(AutoCurationConfig::default()),
                ..Self::paper().curation
            },
            dataset: SplitSpec {
                train_pos: 40,
                train_neg: 40,
                val_pos: 10,
                val_neg: 10,
                test_pos: 20,
                test_neg: 20,
            },
            vit: ViTConfig::desk(),
            train: TrainConfig {
                batch_size: 16,
                epochs: 40,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            evaluation: EvaluationConfig {
                class_names: ClassNames {
                    positive: "lesion".into(),
                    negative: "normal".into(),
                },
            },
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn variant_bounds(&self) -> VariantBounds {
        match self.profile {
            Profile::Paper => VariantBounds::FULL,
            Profile::Desk => VariantBounds::DESK,
        }
    }

    pub fn data_path(&self, rel: &Path) -> PathBuf {
        manifest::resolve_path(&self.data_root, &rel.to_string_lossy())
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    /// Static checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.finetune.validate().map_err(|e| cfg(&e))?;
        self.campaign
            .validate(self.variant_bounds())
            .map_err(|e| cfg(&e))?;
        self.vit.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        NoiseSchedule::from_config(self.base.schedule).map_err(|e| cfg(&e))?;
        if self.vit.channels != self.base.channels {
            return Err(PipelineError::Config(format!(
                "vit.channels {} differs from base.channels {}",
                self.vit.channels, self.base.channels
            )));
        }
        if self.superres.enabled && self.superres.factor < 2 {
            return Err(PipelineError::Config("superres.factor must be >= 2".into()));
        }
        if self.campaign.total_variants() < self.dataset.train_pos {
            return Err(PipelineError::Config(format!(
                "campaign generates {} candidates but dataset.train_pos needs {} accepted",
                self.campaign.total_variants(),
                self.dataset.train_pos
            )));
        }
        Ok(())
    }
}

/// Recursively overlay `patch` onto `base`: objects merge key by key, any
/// other value replaces.
pub fn deep_merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Per-section seeds that follow the global seed unless set explicitly.
const SEED_PATHS: [&[&str]; 4] = [
    &["finetune", "seed"],
    &["base", "pretrain", "seed"],
    &["superres", "config", "seed"],
    &["train", "seed"],
];

fn lookup<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

/// Command-line and environment overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub data_root: Option<PathBuf>,
}

/// Profile defaults, then the config file, then `overrides`.
pub fn resolve_config(file: Option<&Value>, overrides: &Overrides) -> Result<PipelineConfig> {
    let empty = json!({});
    let file = file.unwrap_or(&empty);
    if !file.is_object() {
        return Err(PipelineError::Config(
            "config file must hold a JSON object".into(),
        ));
    }
    let profile = match (overrides.profile, file.get("profile")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .map_err(|e| PipelineError::Config(format!("profile: {e}")))?,
        (None, None) => Profile::default(),
    };
    let mut merged = serde_json::to_value(PipelineConfig::for_profile(profile))?;
    deep_merge(&mut merged, file);
    merged["profile"] = serde_json::to_value(profile)?;
    if let Some(seed) = overrides.seed {
        merged["seed"] = seed.into();
    }
    let seed = merged["seed"].clone();
    for path in SEED_PATHS {
        if lookup(file, path).is_none() {
            let (last, parents) = path.split_last().unwrap();
            let mut slot = &mut merged;
            for k in parents {
                slot = &mut slot[*k];
            }
            slot[*last] = seed.clone();
        }
    }
    if let Some(root) = &overrides.data_root {
        merged["data_root"] = serde_json::to_value(root)?;
    }
    let config: PipelineConfig =
        serde_json::from_value(merged).map_err(|e| PipelineError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Read `path` (if any) and resolve, honouring `SYNTHVISION_DATA_ROOT` unless
/// `overrides.data_root` is already set.
pub fn load_config(path: Option<&Path>, mut overrides: Overrides) -> Result<PipelineConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            Some(
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    if overrides.data_root.is_none() {
        overrides.data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    }
    resolve_config(file.as_ref(), &overrides)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedStage {
    pub stage: Stage,
    pub finished_at: DateTime<Utc>,
    pub summary: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub completed: Vec<CompletedStage>,
}

impl StageState {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(STATE_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.completed.iter().any(|c| c.stage == stage)
    }

    pub fn summary(&self, stage: Stage) -> Option<&Value> {
        self.completed
            .iter()
            .find(|c| c.stage == stage)
            .map(|c| &c.summary)
    }

    /// Forget `stage` and every later stage.
    fn invalidate_from(&mut self, stage: Stage) {
        self.completed.retain(|c| c.stage < stage);
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PipelineOutcome {
    Completed {
        ran: Vec<Stage>,
        skipped: Vec<Stage>,
    },
    /// Stopped before curation; a human has to review via `synthvision curate`.
    AwaitingCuration {
        ran: Vec<Stage>,
        skipped: Vec<Stage>,
    },
}

pub const BASE_FILE: &str = "base.bin";
pub const UPSAMPLER_FILE: &str = "upsampler.bin";
pub const ACCEPTED_FILE: &str = "accepted.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const MODEL_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// A locked run directory with its resolved config.
#[derive(Debug)]
pub struct Run {
    pub config: PipelineConfig,
    state: StageState,
    _lock: RunLock,
}

impl Run {
    pub fn open(config: PipelineConfig) -> Result<Self> {
        let lock = RunLock::acquire(&config.run_dir)?;
        let state = StageState::load(&config.run_dir)?;
        let mut text = serde_json::to_string_pretty(&config)?;
        text.push('\n');
        std::fs::write(config.run_dir.join(CONFIG_FILE), text)?;
        Ok(Self {
            config,
            state,
            _lock: lock,
        })
    }

    pub fn state(&self) -> &StageState {
        &self.state
    }

    fn save_state(&self) -> Result<()> {
        let tmp = self.config.run_dir.join(format!("{STATE_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.state)?)?;
        std::fs::rename(tmp, self.config.run_dir.join(STATE_FILE))?;
        Ok(())
    }

    fn mark_done(&mut self, stage: Stage, summary: Value) -> Result<()> {
        self.state.invalidate_from(stage);
        self.state.completed.push(CompletedStage {
            stage,
            finished_at: Utc::now(),
            summary,
        });
        self.save_state()
    }

    /// `prepare` only has work to do when procedural data is configured.
    fn is_required(&self, stage: Stage) -> bool {
        stage != Stage::Prepare || self.config.data.toy.is_some()
    }

    fn check_ready(&self, stage: Stage, overwrite: bool) -> Result<()> {
        if self.state.is_done(stage) && !overwrite {
            return Err(PipelineError::AlreadyExists(stage));
        }
        let mut prev = stage.previous();
        while let Some(p) = prev {
            if self.is_required(p) && !self.state.is_done(p) {
                return Err(PipelineError::Prerequisite { stage, missing: p });
            }
            prev = p.previous();
        }
        Ok(())
    }

    /// Clear the stage directory and forget this and every later stage.
    fn reset(&mut self, stage: Stage) -> Result<PathBuf> {
        let dir = self.config.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        self.state.invalidate_from(stage);
        self.save_state()?;
        Ok(dir)
    }

    /// Run one stage. Fails with [`PipelineError::AlreadyExists`] if it has
    /// completed before, unless `overwrite` is set. Curation without an
    /// automatic reviewer is not a runnable stage; see [`Run::curation_service`].
    pub fn run_stage(&mut self, stage: Stage, overwrite: bool) -> Result<Value> {
        self.check_ready(stage, overwrite)?;
        if stage == Stage::Curate && self.config.curation.auto.is_none() {
            return Err(PipelineError::Config(
                "no automatic reviewer configured; review with `synthvision curate`".into(),
            ));
        }
        self.check_inputs(stage)?;
        let dir = self.reset(stage)?;
        log::info!("stage {stage}: start");
        let summary = match stage {
            Stage::Prepare => self.prepare(&dir)?,
            Stage::Base => self.base(&dir)?,
            Stage::Finetune => self.finetune(&dir)?,
            Stage::Generate => self.generate(&dir)?,
            Stage::Curate => self.auto_curate(&dir)?,
            Stage::BuildDataset => self.build_dataset(&dir)?,
            Stage::Train => self.train(&dir)?,
            Stage::Evaluate => self.evaluate(&dir)?,
        };
        self.mark_done(stage, summary.clone())?;
        log::info!("stage {stage}: done");
        Ok(summary)
    }

    /// Run every remaining stage in order. With `overwrite` the whole run
    /// starts over; otherwise completed stages are skipped (resume).
    pub fn run_all(&mut self, overwrite: bool) -> Result<PipelineOutcome> {
        if overwrite {
            self.state.completed.clear();
            self.save_state()?;
        }
        let (mut ran, mut skipped) = (Vec::new(), Vec::new());
        for stage in Stage::ALL {
            if !self.is_required(stage) {
                continue;
            }
            if self.state.is_done(stage) {
                skipped.push(stage);
                continue;
            }
            if stage == Stage::Curate && self.config.curation.auto.is_none() {
                return Ok(PipelineOutcome::AwaitingCuration { ran, skipped });
            }
            self.run_stage(stage, false)?;
            ran.push(stage);
        }
        Ok(PipelineOutcome::Completed { ran, skipped })
    }

    /// Inputs that must exist before `stage` starts.
    fn check_inputs(&self, stage: Stage) -> Result<()> {
        let c = &self.config;
        let need = |p: PathBuf, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(PipelineError::Config(format!(
                    "{what} not found: {}",
                    p.display()
                )))
            }
        };
        match stage {
            Stage::Base => match &c.base.checkpoint {
                Some(ckpt) => need(ckpt.clone(), "base checkpoint"),
                None => {
                    need(c.data_path(&c.data.corpus), "base corpus directory")?;
                    need(c.data_path(&c.data.guides), "guide image directory")
                }
            },
            Stage::Finetune => need(c.data_path(&c.data.guides), "guide image directory"),
            Stage::BuildDataset => need(c.data_path(&c.data.real_manifest), "real image manifest"),
            _ => Ok(()),
        }
    }

    fn prepare(&self, dir: &Path) -> Result<Value> {
        let st = Stage::Prepare;
        let c = &self.config;
        let toy = c.data.toy.as_ref().expect("prepare requires toy data");
        let m = &toy.modality;
        toy::write_guides(
            m,
            &c.data_path(&c.data.guides),
            toy.guides,
            &c.finetune.identifier,
            &toy.class_noun,
            c.seed,
        )
        .at(st)?;
        let real_path = c.data_path(&c.data.real_manifest);
        let real_dir = real_path.parent().unwrap_or(Path::new("."));
        let real =
            toy::write_real_images(m, real_dir, toy.real_positive, toy.real_negative, c.seed)
                .at(st)?;
        if real_path != real_dir.join("real.jsonl") {
            real.write(&real_path).at(st)?;
        }
        let corpus_dir = c.data_path(&c.data.corpus);
        std::fs::create_dir_all(&corpus_dir)?;
        let corpus = m.base_corpus(
            toy.corpus,
            &c.finetune.class_prompt,
            &toy.skin_prompt,
            rng::derive(c.seed, rng::label("toy.corpus")),
        );
        for (i, ex) in corpus.iter().enumerate() {
            imaging::save_png(
                &corpus_dir.join(format!("{i:05}.png")),
                &imaging::to_unit(&ex.image),
            )
            .at(st)?;
            std::fs::write(
                corpus_dir.join(format!("{i:05}.txt")),
                format!("{}\n", ex.prompt),
            )?;
        }
        let summary = json!({"guides": toy.guides, "real": real.len(), "corpus": corpus.len()});
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(summary)
    }

    fn base(&self, dir: &Path) -> Result<Value> {
        let st = Stage::Base;
        let c = &self.config;
        let b = &c.base;
        let out = dir.join(BASE_FILE);
        if let Some(ckpt) = &b.checkpoint {
            let model = DiffusionModel::load(ckpt).at(st)?;
            if model.image_shape() != [b.channels, c.finetune.resolution, c.finetune.resolution] {
                return Err(PipelineError::Config(format!(
                    "base checkpoint has image shape {:?}, config expects {} channels at {}",
                    model.image_shape(),
                    b.channels,
                    c.finetune.resolution
                )));
            }
            std::fs::copy(ckpt, &out)?;
            return Ok(json!({"source": ckpt, "params": model.denoiser.num_params()}));
        }
        let (corpus, _) = load_captioned(
            &c.data_path(&c.data.corpus),
            b.channels,
            c.finetune.resolution,
        )
        .at(st)?;
        let (guides, _) = load_captioned(
            &c.data_path(&c.data.guides),
            b.channels,
            c.finetune.resolution,
        )
        .at(st)?;
        let mut words: Vec<String> = Vec::new();
        let prompts = corpus
            .iter()
            .chain(&guides)
            .map(|e| e.prompt.as_str())
            .chain([
                c.finetune.class_prompt.as_str(),
                c.finetune.identifier.as_str(),
            ])
            .chain(c.campaign.templates.iter().map(|t| t.text.as_str()));
        for p in prompts {
            words.extend(tokenize(p));
        }
        let text = TextEncoder::new(
            words.iter().map(String::as_str),
            b.text,
            rng::derive(c.seed, rng::label("base.text")),
        );
        let dc = DenoiserConfig {
            channels: b.channels,
            height: c.finetune.resolution,
            width: c.finetune.resolution,
            base_channels: b.base_channels,
            time_dim: b.time_dim,
            cond_dim: b.text.cond_dim,
            emb_dim: b.emb_dim,
        };
        let denoiser =
            DenoiserParams::init(dc, rng::derive(c.seed, rng::label("base.denoiser"))).at(st)?;
        let schedule = NoiseSchedule::from_config(b.schedule).at(st)?;
        let model = DiffusionModel::new(schedule, denoiser, text).at(st)?;
        let (model, losses) = pretrain_base(model, &corpus, &b.pretrain).at(st)?;
        model
            .save(
                &out,
                json!({"pretrain": b.pretrain, "corpus": corpus.len()}),
            )
            .at(st)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        std::fs::write(dir.join("pretrain_loss.csv"), csv)?;
        let tail = &losses[losses.len().saturating_sub(100)..];
        Ok(json!({
            "params": model.denoiser.num_params(),
            "vocab": model.text.vocab().len(),
            "final_loss_mean100": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        }))
    }

    fn finetune(&self, dir: &Path) -> Result<Value> {
        let st = Stage::Finetune;
        let c = &self.config;
        let f = &c.finetune;
        let base = DiffusionModel::load(&c.stage_dir(Stage::Base).join(BASE_FILE)).at(st)?;
        let guides = c.data_path(&c.data.guides);
        let instance =
            InstanceSet::load_dir(&guides, &f.identifier, c.base.channels, f.resolution).at(st)?;
        let prior = if f.prior_weight > 0.0 {
            build_prior_set(
                &base,
                &f.class_prompt,
                f.prior_set_size,
                rng::derive(f.seed, rng::label("prior")),
            )
            .at(st)?
        } else {
            crate::dreambooth::PriorSet::empty(f.class_prompt.clone())
        };
        prior.write(&dir.join("prior")).at(st)?;
        let outcome = finetune(f, &instance, &prior, &base, dir).at(st)?;
        let mut summary = json!({
            "checkpoints": outcome.checkpoints.iter().map(|(s, _)| s).collect::<Vec<_>>(),
            "final_loss": outcome.history.last().map(|h| h.loss),
        });
        if c.superres.enabled {
            let factor = c.superres.factor;
            let (hr, _) = load_captioned(&guides, c.base.channels, f.resolution * factor).at(st)?;
            let mut pairs = Vec::with_capacity(hr.len());
            for ex in hr {
                let low = imaging::downsample(&ex.image, factor).at(st)?;
                pairs.push((low, ex.image));
            }
            let up = superres_finetune(&pairs, &c.superres.config).at(st)?;
            up.to_checkpoint().write(&dir.join(UPSAMPLER_FILE)).at(st)?;
            summary["superres_factor"] = factor.into();
        }
        Ok(summary)
    }

    fn generate(&self, dir: &Path) -> Result<Value> {
        let st = Stage::Generate;
        let c = &self.config;
        let ft = c.stage_dir(Stage::Finetune);
        let model = DiffusionModel::load(&ft.join(crate::dreambooth::FINAL_CHECKPOINT)).at(st)?;
        let upsampler = if c.superres.enabled {
            let ckpt =
                synthvision_nn::checkpoint::Checkpoint::read(&ft.join(UPSAMPLER_FILE)).at(st)?;
            Some(Upsampler::from_checkpoint(&ckpt).at(st)?)
        } else {
            None
        };
        let generator = Generator {
            model: &model,
            upsampler: upsampler.as_ref(),
        };
        let out =
            generation::run_campaign(&generator, &c.campaign, c.variant_bounds(), dir).at(st)?;
        if out.manifest.is_empty() {
            return Err(stage_err(st)("no candidates were generated".into()));
        }
        Ok(json!({
            "requested": out.report.requested,
            "generated": out.report.generated,
            "failed": out.report.failed.len(),
        }))
    }

    /// Curation service over the generated candidates, with its decisions
    /// log in the curate stage directory. Existing decisions are replayed.
    pub fn curation_service(&self) -> Result<CurationService> {
        let st = Stage::Curate;
        if !self.state.is_done(Stage::Generate) {
            return Err(PipelineError::Prerequisite {
                stage: st,
                missing: Stage::Generate,
            });
        }
        let gen = self.config.stage_dir(Stage::Generate);
        let candidates = Manifest::load(&gen.join(generation::CANDIDATES_FILE)).at(st)?;
        let dir = self.config.stage_dir(st);
        std::fs::create_dir_all(&dir)?;
        let svc =
            CurationService::open(candidates, &gen, &dir.join(curation::DECISIONS_FILE)).at(st)?;
        if svc.synthetic_count() == 0 {
            return Err(stage_err(st)(
                "candidate manifest has no synthetic images".into(),
            ));
        }
        Ok(svc)
    }

    /// Finalize review: write the accepted manifest (absolute paths) and mark
    /// curation complete, invalidating later stages.
    pub fn finalize_curation(
        &mut self,
        svc: &CurationService,
        target_accepted: usize,
    ) -> Result<PathBuf> {
        let st = Stage::Curate;
        let mut accepted = svc.finalize(target_accepted).at(st)?;
        accepted.absolutize(&self.config.stage_dir(Stage::Generate));
        let path = self.config.stage_dir(st).join(ACCEPTED_FILE);
        accepted.write(&path).at(st)?;
        let s = svc.state();
        self.mark_done(
            st,
            json!({"accepted": s.accepted, "rejected": s.rejected, "total": s.total, "target": target_accepted}),
        )?;
        Ok(path)
    }

    fn auto_curate(&mut self, _dir: &Path) -> Result<Value> {
        let st = Stage::Curate;
        let auto = self
            .config
            .curation
            .auto
            .clone()
            .expect("checked by caller");
        let mut svc = self.curation_service()?;
        let summary = toy::auto_curate(&mut svc, &auto).at(st)?;
        let path = self.finalize_curation(&svc, self.config.dataset.train_pos)?;
        Ok(json!({"auto": summary, "accepted_manifest": path}))
    }

    fn build_dataset(&self, dir: &Path) -> Result<Value> {
        let st = Stage::BuildDataset;
        let c = &self.config;
        let real_path = c.data_path(&c.data.real_manifest);
        let mut all = Manifest::load(&real_path).at(st)?;
        all.absolutize(real_path.parent().unwrap_or(Path::new(".")));
        let accepted = Manifest::load(&c.stage_dir(Stage::Curate).join(ACCEPTED_FILE)).at(st)?;
        all.extend(&accepted).at(st)?;
        let built = manifest::build_training_set(
            &all,
            &c.dataset,
            rng::derive(c.seed, rng::label("dataset")),
        )
        .at(st)?;
        built.write(&dir.join(DATASET_FILE)).at(st)?;
        let stats = manifest::stats(&built);
        std::fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&stats)?)?;
        Ok(json!({
            "train": built.split(Split::Train).len(),
            "val": built.split(Split::Val).len(),
            "test": built.split(Split::Test).len(),
        }))
    }

    fn dataset(&self, stage: Stage) -> Result<Manifest> {
        Manifest::load(
            &self
                .config
                .stage_dir(Stage::BuildDataset)
                .join(DATASET_FILE),
        )
        .at(stage)
    }

    fn train(&self, dir: &Path) -> Result<Value> {
        let st = Stage::Train;
        let c = &self.config;
        let ds = self.dataset(st)?;
        let root = c.stage_dir(Stage::BuildDataset);
        let trained = vit::train(
            &ds.split(Split::Train),
            &ds.split(Split::Val),
            &root,
            &c.vit,
            &c.train,
        )
        .at(st)?;
        let meta = json!({"train": c.train, "best_epoch": trained.best_epoch});
        trained
            .model
            .to_checkpoint(meta)
            .write(&dir.join(MODEL_FILE))
            .at(st)?;
        std::fs::write(dir.join(HISTORY_FILE), vit::history_csv(&trained.history))?;
        let best = &trained.history[trained.best_epoch - 1];
        Ok(json!({
            "best_epoch": trained.best_epoch,
            "epochs_run": trained.history.len(),
            "optimizer_steps": trained.optimizer_steps,
            "val_accuracy": best.val_accuracy,
            "train_accuracy": best.train_accuracy,
        }))
    }

    fn evaluate(&self, dir: &Path) -> Result<Value> {
        let st = Stage::Evaluate;
        let c = &self.config;
        let ds = self.dataset(st)?;
        let ckpt = synthvision_nn::checkpoint::Checkpoint::read(
            &c.stage_dir(Stage::Train).join(MODEL_FILE),
        )
        .at(st)?;
        let model = vit::VitParams::from_checkpoint(&ckpt).at(st)?;
        let preds = vit::predict(
            &model,
            &ds.split(Split::Test),
            &c.stage_dir(Stage::BuildDataset),
        )
        .at(st)?;
        preds.write(&dir.join(PREDICTIONS_FILE)).at(st)?;
        let eval = evaluation::evaluate(&preds, c.evaluation.class_names.clone()).at(st)?;
        evaluation::render_report(&eval, dir).at(st)?;
        Ok(json!({
            "n": eval.n,
            "accuracy": eval.report.accuracy,
            "roc_auc": eval.roc_auc,
            "average_precision": eval.average_precision,
        }))
    }
}
