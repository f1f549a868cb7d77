//! Paired-image upsampler applied after sampling.
//!
//! The network is nearest-neighbour upsampling by an integer factor followed
//! by a residual correction `conv(silu(conv(up)))`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use synthvision_nn::checkpoint::Checkpoint;
use synthvision_nn::optim::{self, OptimizerKind};
use synthvision_nn::{rng, BoundParams, Graph, ParamSet, Tensor, Var};

use super::DreamBoothError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperResConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SuperResConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            steps: 300,
            lr: 1e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub factor: usize,
    pub channels: usize,
    pub params: ParamSet,
}

fn forward(g: &mut Graph, p: &BoundParams, x: Var, factor: usize) -> Var {
    let up = g.upsample(x, factor);
    let h = g.conv2d(up, p.get("conv1.w"), p.get("conv1.b"), 1);
    let h = g.silu(h);
    let r = g.conv2d(h, p.get("conv2.w"), p.get("conv2.b"), 1);
    g.add(up, r)
}

impl Upsampler {
    pub fn init(channels: usize, factor: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::label("superres.init"));
        let mut params = ParamSet::new();
        params.insert(
            "conv1.w",
            Tensor::randn(
                &[hidden, channels, 3, 3],
                (1.0 / (9 * channels) as f64).sqrt(),
                &mut r,
            ),
        );
        params.insert("conv1.b", Tensor::zeros(&[hidden]));
        params.insert(
            "conv2.w",
            Tensor::randn(
                &[channels, hidden, 3, 3],
                0.1 * (1.0 / (9 * hidden) as f64).sqrt(),
                &mut r,
            ),
        );
        params.insert("conv2.b", Tensor::zeros(&[channels]));
        Self {
            factor,
            channels,
            params,
        }
    }

    /// Upsample a batch `[N, C, h, w]` (values in `[-1, 1]`).
    pub fn apply_batch(&self, low: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(low.clone());
        let y = forward(&mut g, &p, x, self.factor);
        g.value(y).clone()
    }

    /// Upsample one `[C, h, w]` image and clamp to `[-1, 1]`.
    pub fn apply(&self, low: &Tensor) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(low.shape());
        let out = self.apply_batch(&low.clone().reshape(&shape).expect("same length"));
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
            .expect("drop batch axis")
            .map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "upsampler",
            serde_json::json!({ "factor": self.factor, "channels": self.channels }),
        )
        .with_group("upsampler", self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, DreamBoothError> {
        let field = |k: &str| {
            ckpt.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| {
                DreamBoothError::InvalidArgument(format!("upsampler checkpoint lacks `{k}`"))
            })
        };
        Ok(Self {
            factor: field("factor")?,
            channels: field("channels")?,
            params: ckpt.group("upsampler")?.clone(),
        })
    }
}

/// Mean squared error of the upsampler over all pairs.
pub fn pair_loss(model: &Upsampler, pairs: &[(Tensor, Tensor)]) -> f64 {
    let low =
        Tensor::stack(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>()).expect("validated");
    let high =
        Tensor::stack(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>()).expect("validated");
    let pred = model.apply_batch(&low);
    let n = pred.len() as f64;
    pred.data()
        .iter()
        .zip(high.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Check pair shapes; returns `(channels, factor)`.
pub fn validate_pairs(pairs: &[(Tensor, Tensor)]) -> Result<(usize, usize), DreamBoothError> {
    let Some((l0, h0)) = pairs.first() else {
        return Err(DreamBoothError::InvalidArgument(
            "super-resolution needs at least one pair".into(),
        ));
    };
    let (ls, hs) = (l0.shape(), h0.shape());
    if ls.len() != 3 || hs.len() != 3 || ls[0] != hs[0] || ls[1] == 0 || ls[2] == 0 {
        return Err(DreamBoothError::Shape(format!(
            "pair shapes {ls:?} -> {hs:?}"
        )));
    }
    if hs[1] % ls[1] != 0 || hs[2] % ls[2] != 0 || hs[1] / ls[1] != hs[2] / ls[2] {
        return Err(DreamBoothError::Shape(format!(
            "high-res {hs:?} is not an integer multiple of low-res {ls:?}"
        )));
    }
    for (l, h) in pairs {
        if l.shape() != ls || h.shape() != hs {
            return Err(DreamBoothError::Shape(format!(
                "inconsistent pair shapes {:?} -> {:?} (expected {ls:?} -> {hs:?})",
                l.shape(),
                h.shape()
            )));
        }
    }
    Ok((ls[0], hs[1] / ls[1]))
}

/// Fit an upsampler to `(low, high)` pairs with Adam on mean squared error.
pub fn superres_finetune(
    pairs: &[(Tensor, Tensor)],
    config: &SuperResConfig,
) -> Result<Upsampler, DreamBoothError> {
    let (channels, factor) = validate_pairs(pairs)?;
    if config.batch_size == 0 || config.lr <= 0.0 {
        return Err(DreamBoothError::InvalidArgument(
            "batch_size and lr must be positive".into(),
        ));
    }
    let mut model = Upsampler::init(channels, factor, config.hidden, config.seed);
    let mut opt = optim::build(OptimizerKind::Adam, config.lr);
    let mut r = rng::stream(config.seed, rng::label("superres.batches"));
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size.min(pairs.len()))
            .map(|_| r.random_range(0..pairs.len()))
            .collect();
        let low = Tensor::stack(&idx.iter().map(|&i| pairs[i].0.clone()).collect::<Vec<_>>())?;
        let high = Tensor::stack(&idx.iter().map(|&i| pairs[i].1.clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = g.bind(&model.params, true);
        let x = g.constant(low);
        let y = forward(&mut g, &p, x, factor);
        let target = g.constant(high);
        let loss = g.mse(y, target);
        if !g.value(loss).item().is_finite() {
            return Err(DreamBoothError::NonFiniteLoss {
                step: 0,
                value: g.value(loss).item(),
            });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.params, &p.collect(&grads));
    }
    Ok(model)
}
