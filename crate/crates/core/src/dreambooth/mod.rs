//! Subject-driven fine-tuning of the diffusion model: identifier prompts,
//! class prior preservation, joint denoiser/text-encoder updates, periodic
//! checkpoints and the paired super-resolution stage.

pub mod superres;
pub mod text;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::Utc;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use synthvision_nn::checkpoint::{self, Checkpoint};
use synthvision_nn::optim::{self, OptimizerKind};
use synthvision_nn::{rng, BoundParams, Graph, Tensor, Var};

use crate::diffusion::{
    self, DenoiserConfig, DenoiserParams, DiffusionError, NoiseSchedule, ScheduleConfig,
};
use crate::imaging::{self, ImageError};
pub use superres::{superres_finetune, SuperResConfig, Upsampler};
pub use text::{tokenize, TextEncoder, TextEncoderConfig};

#[derive(Debug, thiserror::Error)]
pub enum DreamBoothError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("instance set: {0}")]
    Instance(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Nn(#[from] synthvision_nn::NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DreamBoothError> = std::result::Result<T, E>;

/// Denoiser, prompt encoder and noise schedule travelling together.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserParams,
    pub text: TextEncoder,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    schedule: ScheduleConfig,
    denoiser: DenoiserConfig,
    text: TextEncoderConfig,
    vocab: Vec<String>,
}

impl DiffusionModel {
    pub fn new(
        schedule: NoiseSchedule,
        denoiser: DenoiserParams,
        text: TextEncoder,
    ) -> Result<Self> {
        if text.cond_dim() != denoiser.config.cond_dim {
            return Err(DreamBoothError::Shape(format!(
                "text encoder emits {} values, denoiser expects {}",
                text.cond_dim(),
                denoiser.config.cond_dim
            )));
        }
        Ok(Self {
            schedule,
            denoiser,
            text,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.denoiser.config.image_shape()
    }

    /// One image `[C, H, W]` in `[-1, 1]` for `prompt`, fully determined by `seed`.
    pub fn sample_one(&self, prompt: &str, seed: u64) -> Result<Tensor> {
        let cond = self.text.encode(prompt);
        let mut out = diffusion::sample(
            &self.denoiser,
            self.image_shape(),
            &self.schedule,
            &cond,
            seed,
            1,
        )?;
        Ok(out.remove(0))
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            schedule: self.schedule.config(),
            denoiser: self.denoiser.config,
            text: self.text.config,
            vocab: self.text.vocab().to_vec(),
        };
        let mut meta = serde_json::to_value(meta).expect("meta serializes");
        meta["extra"] = extra;
        Checkpoint::new("diffusion_model", meta)
            .with_group("denoiser", self.denoiser.params.clone())
            .with_group("text_encoder", self.text.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "diffusion_model" {
            return Err(DreamBoothError::InvalidArgument(format!(
                "expected a diffusion_model checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())?;
        let schedule = NoiseSchedule::from_config(meta.schedule)?;
        let mut denoiser = DenoiserParams::zeros(meta.denoiser)?;
        let stored = ckpt.group("denoiser")?;
        if stored.len() != denoiser.params.len() {
            return Err(DreamBoothError::Shape("denoiser tensor count".into()));
        }
        for ((name, want), (_, got)) in denoiser.params.clone().iter().zip(stored.iter()) {
            if want.shape() != got.shape() {
                return Err(DreamBoothError::Shape(format!("denoiser tensor {name}")));
            }
        }
        denoiser.params = stored.clone();
        let text =
            TextEncoder::from_parts(meta.text, meta.vocab, ckpt.group("text_encoder")?.clone());
        Self::new(schedule, denoiser, text)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        Ok(self.to_checkpoint(extra).write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// One training image (values in `[-1, 1]`) with its prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub prompt: String,
}

/// A stacked mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    pub images: Tensor,
    pub prompts: Vec<String>,
}

impl PromptBatch {
    pub fn gather(examples: &[Example], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Ok(Self {
                images: Tensor::zeros(&[0]),
                prompts: Vec::new(),
            });
        }
        let images: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let im = &examples[i].image;
                let mut shape = vec![1];
                shape.extend_from_slice(im.shape());
                im.clone().reshape(&shape).expect("same length")
            })
            .collect();
        let n = images.len();
        let stacked = Tensor::stack(&images)?;
        let mut shape = vec![n];
        shape.extend_from_slice(&stacked.shape()[2..]);
        Ok(Self {
            images: stacked.reshape(&shape)?,
            prompts: indices
                .iter()
                .map(|&i| examples[i].prompt.clone())
                .collect(),
        })
    }

    pub fn all(examples: &[Example]) -> Result<Self> {
        Self::gather(examples, &(0..examples.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Guide images paired with identifier prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub identifier: String,
    pub examples: Vec<Example>,
    pub sources: Vec<PathBuf>,
}

fn identifier_count(prompt: &str, identifier: &str) -> usize {
    let id = identifier.to_lowercase();
    tokenize(prompt).iter().filter(|t| **t == id).count()
}

impl InstanceSet {
    pub fn new(identifier: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        let identifier = identifier.into();
        for (i, ex) in examples.iter().enumerate() {
            let n = identifier_count(&ex.prompt, &identifier);
            if n != 1 {
                return Err(DreamBoothError::Instance(format!(
                    "prompt {i} (`{}`) contains identifier `{identifier}` {n} times, expected exactly once",
                    ex.prompt
                )));
            }
        }
        let sources = vec![PathBuf::new(); examples.len()];
        Ok(Self {
            identifier,
            examples,
            sources,
        })
    }

    /// Load captioned guides with [`load_captioned`].
    pub fn load_dir(
        dir: &Path,
        identifier: &str,
        channels: usize,
        resolution: usize,
    ) -> Result<Self> {
        let (examples, sources) = load_captioned(dir, channels, resolution)?;
        let mut set = Self::new(identifier, examples)?;
        set.sources = sources;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Load `dir/*.{png,jpg,jpeg}` with same-stem `.txt` prompts, in file name
/// order. Images are centre-cropped to a square and resized to `resolution`,
/// then mapped to `[-1, 1]`. Guides are expected to be cropped to the lesion
/// region already.
pub fn load_captioned(
    dir: &Path,
    channels: usize,
    resolution: usize,
) -> Result<(Vec<Example>, Vec<PathBuf>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DreamBoothError::Instance(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DreamBoothError::Instance(format!(
            "no images in {}",
            dir.display()
        )));
    }
    let mut examples = Vec::with_capacity(paths.len());
    for p in &paths {
        let txt = p.with_extension("txt");
        let prompt = std::fs::read_to_string(&txt)
            .map_err(|e| DreamBoothError::Instance(format!("{}: {e}", txt.display())))?
            .trim()
            .to_string();
        let img = imaging::load(p, channels)?;
        let img = imaging::resize(&center_square(&img), resolution, resolution)?;
        examples.push(Example {
            image: imaging::to_signed(&img),
            prompt,
        });
    }
    Ok((examples, paths))
}

fn center_square(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let s = h.min(w);
    if h == w {
        return t.clone();
    }
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    Tensor::from_fn(&[c, s, s], |i| {
        let (ch, rem) = (i / (s * s), i % (s * s));
        t.data()[(ch * h + y0 + rem / s) * w + x0 + rem % s]
    })
}

/// Class images sampled from the frozen base model.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    pub class_prompt: String,
    pub examples: Vec<Example>,
    pub seeds: Vec<u64>,
}

impl PriorSet {
    pub fn empty(class_prompt: impl Into<String>) -> Self {
        Self {
            class_prompt: class_prompt.into(),
            examples: Vec::new(),
            seeds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Write the images and a `prior.json` provenance file to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (ex, seed) in self.examples.iter().zip(&self.seeds) {
            let name = format!("prior_s{seed}.png");
            imaging::save_png(&dir.join(&name), &imaging::to_unit(&ex.image))?;
            files.push(serde_json::json!({ "file": name, "seed": seed, "prompt": ex.prompt }));
        }
        let meta = serde_json::json!({ "class_prompt": self.class_prompt, "images": files });
        std::fs::write(dir.join("prior.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Sample `n` class images from `base`; image `i` uses seed `derive(seed, i)`.
pub fn build_prior_set(
    base: &DiffusionModel,
    class_prompt: &str,
    n: usize,
    seed: u64,
) -> Result<PriorSet> {
    let mut set = PriorSet::empty(class_prompt);
    for i in 0..n {
        let s = rng::derive(seed, i as u64);
        set.examples.push(Example {
            image: base.sample_one(class_prompt, s)?,
            prompt: class_prompt.to_string(),
        });
        set.seeds.push(s);
    }
    Ok(set)
}

/// Loss terms recorded in a graph.
pub struct LossTerms {
    pub total: Var,
    pub instance: Var,
    pub prior: Option<Var>,
}

/// `L_simple(instance) + λ·L_simple(prior)` recorded in `g`.
///
/// Both terms use the same noise seed. With `λ = 0` the prior term is not
/// evaluated at all.
#[allow(clippy::too_many_arguments)]
pub fn prior_preservation_graph(
    g: &mut Graph,
    denoiser: &BoundParams,
    text: &TextEncoder,
    text_params: &BoundParams,
    instance: &PromptBatch,
    prior: &PromptBatch,
    lambda: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LossTerms> {
    if instance.is_empty() {
        return Err(DreamBoothError::InvalidArgument(
            "instance batch is empty".into(),
        ));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(DreamBoothError::InvalidArgument(format!(
            "prior weight {lambda} must be >= 0"
        )));
    }
    if lambda > 0.0 && prior.is_empty() {
        return Err(DreamBoothError::InvalidArgument(
            "prior weight > 0 requires a non-empty prior batch".into(),
        ));
    }
    let cond = text.encode_graph(g, text_params, &instance.prompts);
    let inst = diffusion::loss_simple_graph(g, denoiser, &instance.images, cond, schedule, seed)?;
    if lambda == 0.0 {
        return Ok(LossTerms {
            total: inst,
            instance: inst,
            prior: None,
        });
    }
    let pcond = text.encode_graph(g, text_params, &prior.prompts);
    let pl = diffusion::loss_simple_graph(g, denoiser, &prior.images, pcond, schedule, seed)?;
    let weighted = g.scale(pl, lambda);
    Ok(LossTerms {
        total: g.add(inst, weighted),
        instance: inst,
        prior: Some(pl),
    })
}

/// Value of the prior-preservation objective for `model`.
pub fn prior_preservation_loss(
    model: &DiffusionModel,
    instance: &PromptBatch,
    prior: &PromptBatch,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let dp = g.bind(&model.denoiser.params, false);
    let tp = g.bind(&model.text.params, false);
    let terms = prior_preservation_graph(
        &mut g,
        &dp,
        &model.text,
        &tp,
        instance,
        prior,
        lambda,
        &model.schedule,
        seed,
    )?;
    Ok(g.value(terms.total).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub unet_steps: usize,
    pub unet_lr: f64,
    pub text_steps: usize,
    pub text_lr: f64,
    pub resolution: usize,
    pub checkpoint_every: usize,
    pub prior_weight: f64,
    pub prior_set_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub identifier: String,
    pub class_prompt: String,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            unet_steps: 2000,
            unet_lr: 2e-6,
            text_steps: 350,
            text_lr: 4e-7,
            resolution: 512,
            checkpoint_every: 500,
            prior_weight: 1.0,
            prior_set_size: 100,
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            identifier: "sks".into(),
            class_prompt: "a photo of a wart".into(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DreamBoothError::InvalidArgument(m.to_string()));
        if self.unet_steps == 0
            || self.text_steps == 0
            || self.checkpoint_every == 0
            || self.batch_size == 0
        {
            return bad("unet_steps, text_steps, checkpoint_every and batch_size must be >= 1");
        }
        if self.resolution == 0 {
            return bad("resolution must be >= 1");
        }
        if !(self.unet_lr > 0.0 && self.text_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            return bad("prior_weight must be >= 0");
        }
        if tokenize(&self.identifier).len() != 1 {
            return bad("identifier must be a single token");
        }
        Ok(())
    }

    /// Steps at which a checkpoint is written: every multiple of
    /// `checkpoint_every`, plus the last step when it is not one.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        (1..=self.unet_steps)
            .filter(|s| s % self.checkpoint_every == 0 || *s == self.unet_steps)
            .collect()
    }
}

/// Seed for the noise draw of training step `step` (1-based).
pub fn step_seed(seed: u64, step: usize) -> u64 {
    rng::derive(seed, step as u64)
}

/// Mini-batch indices for one step, drawn with replacement. Instance indices
/// come first, then (if `n_prior > 0`) prior indices from the same stream.
pub fn batch_indices(
    step_seed: u64,
    n_instance: usize,
    n_prior: usize,
    batch: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(step_seed, rng::label("finetune.batch"));
    let inst = (0..batch).map(|_| r.random_range(0..n_instance)).collect();
    let prior = if n_prior > 0 {
        (0..batch).map(|_| r.random_range(0..n_prior)).collect()
    } else {
        Vec::new()
    };
    (inst, prior)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub instance_loss: f64,
    pub prior_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub model: DiffusionModel,
    pub history: Vec<StepLoss>,
    /// `(step, path)` of every periodic/final checkpoint in order.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub final_checkpoint: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "ckpt_final.bin";

fn loss_csv(history: &[StepLoss]) -> String {
    let mut s = String::from("step,loss,instance_loss,prior_loss\n");
    for h in history {
        let prior = h.prior_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", h.step, h.loss, h.instance_loss, prior);
    }
    s
}

/// Fine-tune `base` on `instance` with class prior preservation.
///
/// The denoiser is updated at every step; the text encoder only during the
/// first `text_steps` steps and is frozen afterwards. Writes
/// `ckpt_step{N}.bin` files, a copy of the last one as `ckpt_final.bin`,
/// `loss.csv` and `run.json` into `run_dir`.
pub fn finetune(
    config: &FineTuneConfig,
    instance: &InstanceSet,
    prior: &PriorSet,
    base: &DiffusionModel,
    run_dir: &Path,
) -> Result<FineTuneOutcome> {
    config.validate()?;
    if instance.is_empty() {
        return Err(DreamBoothError::Instance("instance set is empty".into()));
    }
    let shape = base.image_shape();
    for (i, ex) in instance.examples.iter().chain(&prior.examples).enumerate() {
        if ex.image.shape() != shape {
            return Err(DreamBoothError::Shape(format!(
                "training image {i} has shape {:?}, model expects {shape:?}",
                ex.image.shape()
            )));
        }
    }
    if shape[1] != config.resolution || shape[2] != config.resolution {
        return Err(DreamBoothError::Shape(format!(
            "model resolution {}x{} differs from configured {}",
            shape[1], shape[2], config.resolution
        )));
    }
    if config.prior_weight > 0.0 && prior.is_empty() {
        return Err(DreamBoothError::InvalidArgument(
            "prior_weight > 0 requires a non-empty prior set".into(),
        ));
    }
    if !base.text.contains(&config.identifier.to_lowercase()) {
        return Err(DreamBoothError::InvalidArgument(format!(
            "identifier `{}` is not in the text encoder vocabulary",
            config.identifier
        )));
    }
    std::fs::create_dir_all(run_dir)?;
    let started_at = Utc::now();

    let mut model = base.clone();
    let mut unet_opt = optim::build(config.optimizer, config.unet_lr);
    let mut text_opt = optim::build(config.optimizer, config.text_lr);
    let n_prior = if config.prior_weight > 0.0 {
        prior.len()
    } else {
        0
    };
    let mut history = Vec::with_capacity(config.unet_steps);
    let mut checkpoints = Vec::new();
    let ckpt_steps = config.checkpoint_steps();

    for step in 1..=config.unet_steps {
        let seed = step_seed(config.seed, step);
        let (ii, pi) = batch_indices(seed, instance.len(), n_prior, config.batch_size);
        let inst_batch = PromptBatch::gather(&instance.examples, &ii)?;
        let prior_batch = PromptBatch::gather(&prior.examples, &pi)?;
        let train_text = step <= config.text_steps;

        let mut g = Graph::new();
        let dp = g.bind(&model.denoiser.params, true);
        let tp = g.bind(&model.text.params, train_text);
        let terms = prior_preservation_graph(
            &mut g,
            &dp,
            &model.text,
            &tp,
            &inst_batch,
            &prior_batch,
            config.prior_weight,
            &model.schedule,
            seed,
        )?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(DreamBoothError::NonFiniteLoss { step, value: loss });
        }
        let grads = g.backward(terms.total);
        unet_opt.step(&mut model.denoiser.params, &dp.collect(&grads));
        if train_text {
            text_opt.step(&mut model.text.params, &tp.collect(&grads));
        }
        history.push(StepLoss {
            step,
            loss,
            instance_loss: g.value(terms.instance).item(),
            prior_loss: terms.prior.map(|v| g.value(v).item()),
        });
        if ckpt_steps.binary_search(&step).is_ok() {
            let path = run_dir.join(format!("ckpt_step{step}.bin"));
            model.save(&path, serde_json::json!({ "step": step }))?;
            log::info!("step {step}: loss {loss:.5}, checkpoint {}", path.display());
            checkpoints.push((step, path));
        }
    }

    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    let (_, last) = checkpoints.last().expect("at least one checkpoint");
    std::fs::copy(last, &final_checkpoint)?;
    checkpoint::write_atomic(&run_dir.join("loss.csv"), loss_csv(&history).as_bytes())?;
    let run = serde_json::json!({
        "version": crate::VERSION,
        "config": config,
        "started_at": started_at,
        "finished_at": Utc::now(),
        "instance_images": instance.sources.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "instance_count": instance.len(),
        "prior_count": prior.len(),
        "prior_seeds": prior.seeds,
        "loss_csv": "loss.csv",
        "checkpoints": checkpoints.iter().map(|(s, p)| serde_json::json!({
            "step": s,
            "file": p.file_name().map(|f| f.to_string_lossy().into_owned()),
        })).collect::<Vec<_>>(),
        "final_checkpoint": FINAL_CHECKPOINT,
    });
    checkpoint::write_atomic(
        &run_dir.join("run.json"),
        serde_json::to_string_pretty(&run)?.as_bytes(),
    )?;

    Ok(FineTuneOutcome {
        model,
        history,
        checkpoints,
        final_checkpoint,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 2e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Train a base model from scratch on a captioned corpus (Adam, joint
/// denoiser and text encoder). Stands in for a pretrained checkpoint.
pub fn pretrain_base(
    model: DiffusionModel,
    corpus: &[Example],
    config: &PretrainConfig,
) -> Result<(DiffusionModel, Vec<f64>)> {
    if corpus.is_empty() || config.batch_size == 0 {
        return Err(DreamBoothError::InvalidArgument(
            "pretraining needs a corpus and batch_size >= 1".into(),
        ));
    }
    let mut model = model;
    let mut unet_opt = optim::build(OptimizerKind::Adam, config.lr);
    let mut text_opt = optim::build(OptimizerKind::Adam, config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    let empty = PromptBatch::gather(&[], &[])?;
    for step in 1..=config.steps {
        let seed = step_seed(rng::derive(config.seed, rng::label("pretrain")), step);
        let (idx, _) = batch_indices(seed, corpus.len(), 0, config.batch_size);
        let batch = PromptBatch::gather(corpus, &idx)?;
        let mut g = Graph::new();
        let dp = g.bind(&model.denoiser.params, true);
        let tp = g.bind(&model.text.params, true);
        let terms = prior_preservation_graph(
            &mut g,
            &dp,
            &model.text,
            &tp,
            &batch,
            &empty,
            0.0,
            &model.schedule,
            seed,
        )?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(DreamBoothError::NonFiniteLoss { step, value: loss });
        }
        let grads = g.backward(terms.total);
        unet_opt.step(&mut model.denoiser.params, &dp.collect(&grads));
        text_opt.step(&mut model.text.params, &tp.collect(&grads));
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.5}");
        }
    }
    Ok((model, losses))
}
