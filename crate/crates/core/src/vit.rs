//! Vision-transformer patch classifier and its training loop.
//!
//! Pre-norm transformer blocks over a class token plus linearly embedded
//! patches, learned position embeddings, tanh-GELU MLPs and dropout on the
//! attention-weight matrix (inverted scaling, train mode only).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use synthvision_nn::checkpoint::Checkpoint;
use synthvision_nn::optim::{self, OptimizerKind};
use synthvision_nn::{rng, BoundParams, Graph, ParamSet, Tensor, Var};

use crate::imaging::{self, ImageError};
use crate::manifest::{resolve_path, ClassLabel, Manifest};

#[derive(Debug, thiserror::Error)]
pub enum VitError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("prediction file line {line}: {message}")]
    PredictionFormat { line: usize, message: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nn(#[from] synthvision_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = VitError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention_dropout_rate: f64,
    pub num_classes: usize,
    /// Pixels in `[0, 1]` are mapped to `(x - norm_mean) / norm_std`.
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl Default for ViTConfig {
    /// Base-size transformer on 224-pixel RGB inputs.
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            attention_dropout_rate: 0.1,
            num_classes: 2,
            norm_mean: 0.5,
            norm_std: 0.5,
        }
    }
}

impl ViTConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VitError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if !(0.0..1.0).contains(&self.attention_dropout_rate) {
            return bad(format!(
                "attention_dropout_rate {} outside [0, 1)",
                self.attention_dropout_rate
            ));
        }
        if self.num_classes < 2 || self.mlp_ratio == 0 || self.channels == 0 {
            return bad("num_classes >= 2, mlp_ratio >= 1 and channels >= 1 are required".into());
        }
        if self.norm_std <= 0.0 {
            return bad("norm_std must be > 0".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Split `[C, H, W]` into `(H/p)·(W/p)` row-major patches, each flattened in
/// `(y, x, channel)` order, giving `[num_patches, p·p·C]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(VitError::Shape(format!(
            "expected [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(VitError::Shape(format!(
            "{h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let d = image.data();
    let mut out = Vec::with_capacity(image.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out.push(d[(ch * h + py * p + y) * w + px * p + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, p * p * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    p: usize,
) -> Result<Tensor> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(VitError::Shape(format!(
            "{height}x{width} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != [gh * gw, p * p * channels] {
        return Err(VitError::Shape(format!(
            "patches {:?} do not tile a {channels}x{height}x{width} image",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; channels * height * width];
    let mut src = patches.data().iter();
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..channels {
                        out[(ch * height + py * p + y) * width + px * p + x] =
                            *src.next().expect("sized");
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[channels, height, width], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout mask for attention weights.
fn dropout_mask(shape: &[usize], rate: f64, r: &mut rng::Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_fn(shape, |_| if r.random::<f64>() < rate { 0.0 } else { keep })
}

/// Scaled dot-product attention over `[B, T, d]` operands recorded in `g`.
/// Dropout masks come from `r` and are only drawn in train mode with a
/// positive rate.
pub fn attention_graph(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    rate: f64,
    mode: Mode,
    r: &mut rng::Rng,
) -> Var {
    let d = *g.shape(q).last().expect("rank 3");
    let scores = g.bmm(q, k, false, true);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let mut w = g.softmax(scores);
    if mode == Mode::Train && rate > 0.0 {
        let mask = g.constant(dropout_mask(g.shape(w), rate, r));
        w = g.mul(w, mask);
    }
    g.bmm(w, v, false, false)
}

/// `softmax(q·kᵀ/√d)·v` for `q: [Tq, d]`, `k, v: [Tk, d]` (or with a leading
/// batch axis).
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VitError::Config(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let lift = |t: &Tensor| -> Result<Tensor> {
        match t.shape().len() {
            2 => {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                Ok(t.clone().reshape(&s)?)
            }
            3 => Ok(t.clone()),
            _ => Err(VitError::Shape(format!(
                "attention operands must be 2-D or 3-D, got {:?}",
                t.shape()
            ))),
        }
    };
    let (q3, k3, v3) = (lift(q)?, lift(k)?, lift(v)?);
    let (qs, ks, vs) = (q3.shape(), k3.shape(), v3.shape());
    if qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
        return Err(VitError::Shape(format!(
            "q {qs:?}, k {ks:?}, v {vs:?} are not conformable"
        )));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q3), g.constant(k3), g.constant(v3.clone()));
    let mut r = rng::stream(seed, rng::label("vit.dropout"));
    let out = attention_graph(&mut g, qv, kv, vv, rate, mode, &mut r);
    let mut shape = q.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = vs[2];
    Ok(g.value(out).clone().reshape(&shape)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitParams {
    pub config: ViTConfig,
    pub params: ParamSet,
}

impl VitParams {
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::label("vit.init"));
        let e = config.embed_dim;
        let hidden = e * config.mlp_ratio;
        let mut p = ParamSet::new();
        let dense = |p: &mut ParamSet, name: &str, i: usize, o: usize, r: &mut rng::Rng| {
            p.insert(
                format!("{name}.w"),
                Tensor::randn(&[i, o], (1.0 / i as f64).sqrt(), r),
            );
            p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        dense(&mut p, "patch", config.patch_dim(), e, &mut r);
        p.insert("cls", Tensor::randn(&[1, e], 0.02, &mut r));
        p.insert(
            "pos",
            Tensor::randn(&[config.num_patches() + 1, e], 0.02, &mut r),
        );
        for b in 0..config.depth {
            p.insert(format!("block{b}.ln1.g"), Tensor::full(&[e], 1.0));
            p.insert(format!("block{b}.ln1.b"), Tensor::zeros(&[e]));
            dense(&mut p, &format!("block{b}.qkv"), e, 3 * e, &mut r);
            dense(&mut p, &format!("block{b}.proj"), e, e, &mut r);
            p.insert(format!("block{b}.ln2.g"), Tensor::full(&[e], 1.0));
            p.insert(format!("block{b}.ln2.b"), Tensor::zeros(&[e]));
            dense(&mut p, &format!("block{b}.fc1"), e, hidden, &mut r);
            dense(&mut p, &format!("block{b}.fc2"), hidden, e, &mut r);
        }
        p.insert("ln.g", Tensor::full(&[e], 1.0));
        p.insert("ln.b", Tensor::zeros(&[e]));
        dense(&mut p, "head", e, config.num_classes, &mut r);
        Ok(Self { config, params: p })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint::new(
            "vit",
            serde_json::json!({ "config": self.config, "info": meta }),
        )
        .with_group("vit", self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "vit" {
            return Err(VitError::Config(format!(
                "expected a vit checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let config: ViTConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let template = Self::init(config.clone(), 0)?;
        let params = ckpt.group("vit")?.clone();
        let same = params.len() == template.params.len()
            && params
                .iter()
                .zip(template.params.iter())
                .all(|((n1, a), (n2, b))| n1 == n2 && a.shape() == b.shape());
        if !same {
            return Err(VitError::Shape(
                "checkpoint tensors do not match the configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }
}

/// Record the classifier on `patches: [B, N, P]`, returning logits `[B, classes]`.
pub fn vit_forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ViTConfig,
    patches: Var,
    mode: Mode,
    r: &mut rng::Rng,
) -> Var {
    let s = g.shape(patches).to_vec();
    let (b, n) = (s[0], s[1]);
    let e = cfg.embed_dim;
    let (heads, dh) = (cfg.heads, cfg.embed_dim / cfg.heads);
    let t = n + 1;

    let x = g.linear(patches, p.get("patch.w"), p.get("patch.b"));
    let cls = g.broadcast(p.get("cls"), b);
    let x = g.concat(cls, x, 1);
    let mut x = g.add_suffix(x, p.get("pos"));

    for blk in 0..cfg.depth {
        let name = |s: &str| format!("block{blk}.{s}");
        let h = g.layer_norm(x, p.get(&name("ln1.g")), p.get(&name("ln1.b")), 1e-6);
        let qkv = g.linear(h, p.get(&name("qkv.w")), p.get(&name("qkv.b")));
        let split = |g: &mut Graph, i: usize| {
            let part = g.slice(qkv, 2, i * e, e);
            let part = g.reshape(part, &[b, t, heads, dh]);
            let part = g.permute(part, &[0, 2, 1, 3]);
            g.reshape(part, &[b * heads, t, dh])
        };
        let (q, k, v) = (split(g, 0), split(g, 1), split(g, 2));
        let o = attention_graph(g, q, k, v, cfg.attention_dropout_rate, mode, r);
        let o = g.reshape(o, &[b, heads, t, dh]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, t, e]);
        let o = g.linear(o, p.get(&name("proj.w")), p.get(&name("proj.b")));
        x = g.add(x, o);
        let h = g.layer_norm(x, p.get(&name("ln2.g")), p.get(&name("ln2.b")), 1e-6);
        let h = g.linear(h, p.get(&name("fc1.w")), p.get(&name("fc1.b")));
        let h = g.gelu(h);
        let h = g.linear(h, p.get(&name("fc2.w")), p.get(&name("fc2.b")));
        x = g.add(x, h);
    }
    let x = g.layer_norm(x, p.get("ln.g"), p.get("ln.b"), 1e-6);
    let cls = g.slice(x, 1, 0, 1);
    let cls = g.reshape(cls, &[b, e]);
    g.linear(cls, p.get("head.w"), p.get("head.b"))
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut d = logits.data().to_vec();
    for row in d.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape(), d).expect("same shape")
}

/// Map a `[C, H, W]` image in `[0, 1]` to model input patches `[N, P]`.
pub fn preprocess(cfg: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    if image.shape().len() != 3 || image.shape()[0] != cfg.channels {
        return Err(VitError::Shape(format!(
            "expected a {}-channel [C, H, W] image, got {:?}",
            cfg.channels,
            image.shape()
        )));
    }
    let resized = imaging::resize(image, cfg.image_size, cfg.image_size)?;
    let normalized = resized.map(|v| (v - cfg.norm_mean) / cfg.norm_std);
    patchify(&normalized, cfg.patch_size)
}

fn stack_patches(items: &[&Tensor]) -> Tensor {
    let owned: Vec<Tensor> = items.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned).expect("uniform patch tensors")
}

impl VitParams {
    /// Class probabilities for pre-processed inputs `[B, N, P]` in eval mode.
    pub fn probabilities(&self, patches: &Tensor) -> Result<Tensor> {
        let want = [self.config.num_patches(), self.config.patch_dim()];
        if patches.shape().len() != 3 || patches.shape()[1..] != want {
            return Err(VitError::Shape(format!(
                "inputs {:?} do not match [B, {}, {}]",
                patches.shape(),
                want[0],
                want[1]
            )));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(patches.clone());
        let mut r = rng::stream(0, rng::label("vit.dropout"));
        let logits = vit_forward(&mut g, &p, &self.config, x, Mode::Eval, &mut r);
        Ok(softmax_rows(g.value(logits)))
    }

    /// Class probabilities for one `[C, H, W]` image in `[0, 1]`.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.shape().len() != 3
            || image.shape()[1] != self.config.image_size
            || image.shape()[2] != self.config.image_size
        {
            return Err(VitError::Shape(format!(
                "image {:?} does not match configured size {}",
                image.shape(),
                self.config.image_size
            )));
        }
        let x = preprocess(&self.config, image)?;
        let x = stack_patches(&[&x]);
        Ok(self.probabilities(&x)?.into_data())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 150,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Rmsprop,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(VitError::Config(
                "batch_size, epochs and learning_rate must be positive".into(),
            ));
        }
        if self.optimizer == OptimizerKind::Sgd {
            log::warn!("training the classifier with plain SGD");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub model: VitParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub optimizer_steps: usize,
}

/// Pre-processed examples of one split.
pub struct LoadedSplit {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn load(manifest: &Manifest, image_root: &Path, cfg: &ViTConfig) -> Result<Self> {
        let mut s = LoadedSplit {
            ids: Vec::new(),
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for r in manifest.records() {
            let img = imaging::load(&resolve_path(image_root, &r.path), cfg.channels)?;
            s.ids.push(r.id.clone());
            s.inputs.push(preprocess(cfg, &img)?);
            s.labels.push(r.class_label.index());
        }
        Ok(s)
    }

    pub fn from_images(cfg: &ViTConfig, images: &[Tensor], labels: &[ClassLabel]) -> Result<Self> {
        Ok(LoadedSplit {
            ids: (0..images.len()).map(|i| format!("img{i}")).collect(),
            inputs: images
                .iter()
                .map(|im| preprocess(cfg, im))
                .collect::<Result<_>>()?,
            labels: labels.iter().map(|l| l.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean cross-entropy and accuracy of `model` on `split` (eval mode).
pub fn evaluate_split(model: &VitParams, split: &LoadedSplit, batch: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for start in (0..split.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(split.len());
        let refs: Vec<&Tensor> = split.inputs[start..end].iter().collect();
        let probs = model.probabilities(&stack_patches(&refs))?;
        let c = model.config.num_classes;
        for (i, row) in probs.data().chunks(c).enumerate() {
            let y = split.labels[start + i];
            loss -= row[y].max(1e-300).ln();
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    let n = split.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Train from random initialization and keep the epoch with the best
/// validation accuracy (ties: lower validation loss, then earlier epoch).
/// Without a validation split the last epoch is kept.
pub fn train_loaded(
    train: &LoadedSplit,
    val: &LoadedSplit,
    vit: &ViTConfig,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    vit.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(VitError::EmptySplit("train"));
    }
    let mut model = VitParams::init(vit.clone(), cfg.seed)?;
    let mut opt = optim::build(cfg.optimizer, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, ParamSet)> = None;
    let mut steps = 0;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::stream(
            rng::derive(cfg.seed, epoch as u64),
            rng::label("vit.shuffle"),
        );
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            steps += 1;
            epoch_steps += 1;
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &train.inputs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let p = g.bind(&model.params, true);
            let x = g.constant(stack_patches(&refs));
            let mut dr = rng::stream(
                rng::derive(cfg.seed, steps as u64),
                rng::label("vit.dropout"),
            );
            let logits = vit_forward(&mut g, &p, &model.config, x, Mode::Train, &mut dr);
            let loss = g.cross_entropy(logits, &labels);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(VitError::NonFiniteLoss {
                    epoch,
                    step: steps,
                    value: lv,
                });
            }
            let c = model.config.num_classes;
            for (row, &y) in g.value(logits).data().chunks(c).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            loss_sum += lv * chunk.len() as f64;
            let grads = g.backward(loss);
            opt.step(&mut model.params, &p.collect(&grads));
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_split(&model, val, cfg.batch_size)?;
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            steps: epoch_steps,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:?} acc {:?}",
            stats.train_loss,
            stats.train_accuracy,
            stats.val_loss,
            stats.val_accuracy
        );
        history.push(stats);

        let (acc, vl) = match (val_accuracy, val_loss) {
            (Some(a), Some(l)) => (a, l),
            _ => (0.0, 0.0),
        };
        let improves = match &best {
            None => true,
            Some(_) if val.is_empty() => true,
            Some((ba, bl, _, _)) => acc > *ba || (acc == *ba && vl < *bl),
        };
        if improves {
            best = Some((acc, vl, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, _, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainedClassifier {
        model,
        history,
        best_epoch,
        optimizer_steps: steps,
    })
}

/// Load both splits from disk and train.
pub fn train(
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    image_root: &Path,
    vit: &ViTConfig,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    vit.validate()?;
    if train_manifest.is_empty() {
        return Err(VitError::EmptySplit("train"));
    }
    let tr = LoadedSplit::load(train_manifest, image_root, vit)?;
    let va = LoadedSplit::load(val_manifest, image_root, vit)?;
    train_loaded(&tr, &va, vit, cfg)
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy,steps\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            h.epoch,
            h.train_loss,
            h.train_accuracy,
            opt(h.val_loss),
            opt(h.val_accuracy),
            h.steps
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Probability of the positive class.
    pub score: f64,
    pub predicted_label: ClassLabel,
    pub true_label: ClassLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

pub const PREDICTIONS_HEADER: &str = "id,score,predicted_label,true_label";

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{PREDICTIONS_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.id, e.score, e.predicted_label, e.true_label
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
            _ => {
                return Err(VitError::PredictionFormat {
                    line: 1,
                    message: format!("expected header `{PREDICTIONS_HEADER}`"),
                })
            }
        }
        let label = |s: &str, line: usize| -> Result<ClassLabel> {
            serde_json::from_value(serde_json::Value::String(s.trim().to_string())).map_err(|_| {
                VitError::PredictionFormat {
                    line,
                    message: format!("unknown label `{s}`"),
                }
            })
        };
        let mut entries = Vec::new();
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let line = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(VitError::PredictionFormat {
                    line,
                    message: format!("expected 4 fields, got {}", f.len()),
                });
            }
            let score: f64 = f[1]
                .trim()
                .parse()
                .map_err(|_| VitError::PredictionFormat {
                    line,
                    message: format!("bad score `{}`", f[1]),
                })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(VitError::PredictionFormat {
                    line,
                    message: format!("score {score} outside [0, 1]"),
                });
            }
            entries.push(Prediction {
                id: f[0].to_string(),
                score,
                predicted_label: label(f[2], line)?,
                true_label: label(f[3], line)?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(synthvision_nn::checkpoint::write_atomic(
            path,
            self.to_csv().as_bytes(),
        )?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Eval-mode predictions for already loaded inputs.
pub fn predict_loaded(model: &VitParams, split: &LoadedSplit) -> Result<PredictionSet> {
    if split.is_empty() {
        return Err(VitError::EmptySplit("prediction"));
    }
    let mut entries = Vec::with_capacity(split.len());
    let batch = 32;
    for start in (0..split.len()).step_by(batch) {
        let end = (start + batch).min(split.len());
        let refs: Vec<&Tensor> = split.inputs[start..end].iter().collect();
        let probs = model.probabilities(&stack_patches(&refs))?;
        let c = model.config.num_classes;
        for (i, row) in probs.data().chunks(c).enumerate() {
            let k = start + i;
            entries.push(Prediction {
                id: split.ids[k].clone(),
                score: row[ClassLabel::Positive.index()],
                predicted_label: ClassLabel::from_index(argmax(row)),
                true_label: ClassLabel::from_index(split.labels[k]),
            });
        }
    }
    Ok(PredictionSet { entries })
}

pub fn predict(model: &VitParams, manifest: &Manifest, image_root: &Path) -> Result<PredictionSet> {
    if manifest.is_empty() {
        return Err(VitError::EmptySplit("prediction"));
    }
    predict_loaded(
        model,
        &LoadedSplit::load(manifest, image_root, &model.config)?,
    )
}
