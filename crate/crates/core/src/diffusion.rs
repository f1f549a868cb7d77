//! Pixel-space denoising diffusion: noise schedules, forward noising, an
//! ε-prediction denoiser, the simple training loss and ancestral sampling.
//!
//! Images are `[N, C, H, W]` tensors with values in `[-1, 1]`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use synthvision_nn::checkpoint::Checkpoint;
use synthvision_nn::{rng, BoundParams, Graph, ParamSet, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] synthvision_nn::NnError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)` for the cosine schedule.
pub fn cosine_f(t: f64, steps: usize) -> f64 {
    let u = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
    u.cos().powi(2)
}

impl NoiseSchedule {
    /// Build a schedule with `steps` discrete timesteps `0..steps`.
    ///
    /// Cosine step `t` covers continuous time `(t, t+1]`, so
    /// `beta[t] = min(1 − f(t+1)/f(t), 0.999)` and, before clipping takes
    /// effect, `alpha_bar[t] = f(t+1)/f(0)`.
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(DiffusionError::InvalidArgument(
                "schedule needs T >= 1".into(),
            ));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![LINEAR_BETA_START],
            ScheduleKind::Linear => (0..steps)
                .map(|t| {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * t as f64 / (steps - 1) as f64
                })
                .collect(),
            ScheduleKind::Cosine => (0..steps)
                .map(|t| {
                    let b = 1.0 - cosine_f(t as f64 + 1.0, steps) / cosine_f(t as f64, steps);
                    b.min(MAX_BETA)
                })
                .collect(),
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config: ScheduleConfig { kind, steps },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn from_config(c: ScheduleConfig) -> Result<Self> {
        Self::new(c.kind, c.steps)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(ab)·x0 + sqrt(1 − ab)·eps` for an explicit cumulative alpha.
pub fn forward_noise_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Tensor::new(x0.shape(), data)?)
}

pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = *schedule.alpha_bar.get(t).ok_or_else(|| {
        DiffusionError::InvalidArgument(format!("timestep {t} outside [0, {})", schedule.steps()))
    })?;
    forward_noise_with(x0, eps, ab)
}

/// Noise a batch with per-sample timesteps.
fn forward_noise_batch(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Tensor {
    let n = x0.shape()[0];
    let d = x0.len() / n.max(1);
    let mut out = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        let ab = schedule.alpha_bar[ti];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xs = &x0.data()[i * d..(i + 1) * d];
        let es = &eps.data()[i * d..(i + 1) * d];
        out.extend(xs.iter().zip(es).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(x0.shape(), out).expect("same shape as x0")
}

/// Sinusoidal timestep features, `[t.len(), dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; t.len() * dim];
    for (row, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            data[row * dim + i] = arg.sin();
            data[row * dim + half + i] = arg.cos();
        }
    }
    Tensor::new(&[t.len(), dim], data).expect("embedding dims")
}

/// Architecture of the convolutional encoder-decoder denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels at full resolution; the bottleneck has twice as many.
    pub base_channels: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub emb_dim: usize,
}

impl DenoiserConfig {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_channels == 0 || self.emb_dim == 0 {
            return Err(DiffusionError::InvalidArgument(
                "denoiser sizes must be positive".into(),
            ));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
            return Err(DiffusionError::InvalidArgument(format!(
                "denoiser needs even spatial size, got {}x{}",
                self.height, self.width
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(DiffusionError::InvalidArgument(
                "time_dim must be even".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the ε-prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn conv_shape(out: usize, inp: usize) -> [usize; 4] {
    [out, inp, 3, 3]
}

impl DenoiserParams {
    fn shapes(c: &DenoiserConfig) -> Vec<(&'static str, Vec<usize>)> {
        let b = c.base_channels;
        vec![
            ("emb.w", vec![c.time_dim + c.cond_dim, c.emb_dim]),
            ("emb.b", vec![c.emb_dim]),
            ("emb1.w", vec![c.emb_dim, b]),
            ("emb1.b", vec![b]),
            ("emb2.w", vec![c.emb_dim, 2 * b]),
            ("emb2.b", vec![2 * b]),
            ("conv_in.w", conv_shape(b, c.channels).to_vec()),
            ("conv_in.b", vec![b]),
            ("down.w", conv_shape(2 * b, b).to_vec()),
            ("down.b", vec![2 * b]),
            ("mid.w", conv_shape(2 * b, 2 * b).to_vec()),
            ("mid.b", vec![2 * b]),
            ("up.w", conv_shape(b, 3 * b).to_vec()),
            ("up.b", vec![b]),
            ("out.w", conv_shape(c.channels, b).to_vec()),
            ("out.b", vec![c.channels]),
        ]
    }

    /// He-style random initialization; the output layer starts small.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::label("denoiser.init"));
        let mut params = ParamSet::new();
        for (name, shape) in Self::shapes(&config) {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                // Linear weights are [in, out]; conv weights are [out, in, k, k].
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let gain = if name == "out.w" { 0.1 } else { 1.0 };
                Tensor::randn(&shape, gain * (1.0 / fan_in as f64).sqrt(), &mut r)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in Self::shapes(&config) {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn to_checkpoint(&self, schedule: ScheduleConfig) -> Checkpoint {
        Checkpoint::new(
            "denoiser",
            serde_json::json!({ "denoiser": self.config, "schedule": schedule }),
        )
        .with_group("denoiser", self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ScheduleConfig)> {
        let config: DenoiserConfig = serde_json::from_value(ckpt.meta["denoiser"].clone())?;
        let schedule: ScheduleConfig = serde_json::from_value(ckpt.meta["schedule"].clone())?;
        let params = ckpt.group("denoiser")?.clone();
        let expected = Self::zeros(config)?;
        for ((n1, a), (n2, b)) in params.iter().zip(expected.params.iter()) {
            if n1 != n2 || a.shape() != b.shape() {
                return Err(DiffusionError::Shape(format!(
                    "checkpoint tensor {n1} does not match {n2}"
                )));
            }
        }
        if params.len() != expected.params.len() {
            return Err(DiffusionError::Shape("checkpoint tensor count".into()));
        }
        Ok((Self { config, params }, schedule))
    }
}

/// Record the denoiser forward pass in `g`.
///
/// `x_t: [N, C, H, W]`, `cond: [N, cond_dim]`; returns predicted noise with the
/// shape of `x_t`. `cond` may be a trainable expression (text encoder output).
pub fn denoiser_forward(g: &mut Graph, p: &BoundParams, x_t: Var, t: &[usize], cond: Var) -> Var {
    let time_dim = g.shape(p.get("emb.w"))[0] - g.shape(cond)[1];
    let temb = g.constant(timestep_embedding(t, time_dim));
    let e = g.concat(temb, cond, 1);
    let e = g.linear(e, p.get("emb.w"), p.get("emb.b"));
    let e = g.silu(e);
    let e1 = g.linear(e, p.get("emb1.w"), p.get("emb1.b"));
    let e2 = g.linear(e, p.get("emb2.w"), p.get("emb2.b"));

    let h1 = g.conv2d(x_t, p.get("conv_in.w"), p.get("conv_in.b"), 1);
    let h1 = g.add_channel(h1, e1);
    let h1 = g.silu(h1);
    let h = g.avg_pool2(h1);
    let h = g.conv2d(h, p.get("down.w"), p.get("down.b"), 1);
    let h = g.add_channel(h, e2);
    let h = g.silu(h);
    let h = g.conv2d(h, p.get("mid.w"), p.get("mid.b"), 1);
    let h = g.silu(h);
    let h = g.upsample(h, 2);
    let h = g.concat(h, h1, 1);
    let h = g.conv2d(h, p.get("up.w"), p.get("up.b"), 1);
    let h = g.silu(h);
    g.conv2d(h, p.get("out.w"), p.get("out.b"), 1)
}

/// Anything that predicts the injected noise for a batch.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

fn check_inputs(c: &DenoiserConfig, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<()> {
    let s = x_t.shape();
    if s.len() != 4 || s[1..] != c.image_shape() {
        return Err(DiffusionError::Shape(format!(
            "x_t {:?} does not match image shape {:?}",
            s,
            c.image_shape()
        )));
    }
    if t.len() != s[0] || cond.shape() != [s[0], c.cond_dim] {
        return Err(DiffusionError::Shape(format!(
            "batch {} needs {} timesteps and cond [{}, {}], got {} and {:?}",
            s[0],
            s[0],
            s[0],
            c.cond_dim,
            t.len(),
            cond.shape()
        )));
    }
    Ok(())
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        check_inputs(&self.config, x_t, t, cond)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let out = denoiser_forward(&mut g, &p, x, t, c);
        Ok(g.value(out).clone())
    }
}

/// Convenience wrapper for a single example.
pub fn predict_eps(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x_t.shape());
    let x = x_t.clone().reshape(&shape)?;
    let c = cond.clone().reshape(&[1, cond.len()])?;
    let out = params.predict(&x, &[t], &c)?;
    Ok(out.reshape(x_t.shape())?)
}

/// Timesteps and noise for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

/// The seeded draw used by [`loss_simple`]: `t ~ U[0, T)` per example, then
/// standard normal noise shaped like the batch.
pub fn draw_noise(seed: u64, batch_shape: &[usize], steps: usize) -> NoiseDraw {
    let mut r = rng::stream(seed, rng::label("diffusion.loss"));
    let t = (0..batch_shape[0])
        .map(|_| r.random_range(0..steps))
        .collect();
    let n = batch_shape.iter().product();
    let eps = Tensor::new(batch_shape, rng::normal_vec(&mut r, n)).expect("noise dims");
    NoiseDraw { t, eps }
}

fn check_batch(x0: &Tensor, cond: &Tensor) -> Result<()> {
    if x0.shape().len() != 4 {
        return Err(DiffusionError::Shape(format!(
            "batch must be [N, C, H, W], got {:?}",
            x0.shape()
        )));
    }
    if x0.shape()[0] == 0 {
        return Err(DiffusionError::InvalidArgument("empty batch".into()));
    }
    if cond.shape().len() != 2 || cond.shape()[0] != x0.shape()[0] {
        return Err(DiffusionError::Shape(format!(
            "cond {:?} does not match batch of {}",
            cond.shape(),
            x0.shape()[0]
        )));
    }
    Ok(())
}

/// Mean squared ε-prediction error per element (the "simple" objective).
pub fn loss_simple(
    model: &impl NoisePredictor,
    x0: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    check_batch(x0, cond)?;
    let draw = draw_noise(seed, x0.shape(), schedule.steps());
    let x_t = forward_noise_batch(x0, &draw.t, &draw.eps, schedule);
    let pred = model.predict(&x_t, &draw.t, cond)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(pred), g.constant(draw.eps));
    let l = g.mse(a, b);
    Ok(g.value(l).item())
}

/// [`loss_simple`] recorded in a graph so gradients reach `p` and `cond`.
pub fn loss_simple_graph(
    g: &mut Graph,
    p: &BoundParams,
    x0: &Tensor,
    cond: Var,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Var> {
    if x0.shape().len() != 4 || x0.shape()[0] == 0 {
        return Err(DiffusionError::InvalidArgument(
            "empty or malformed batch".into(),
        ));
    }
    let draw = draw_noise(seed, x0.shape(), schedule.steps());
    let x_t = g.constant(forward_noise_batch(x0, &draw.t, &draw.eps, schedule));
    let pred = denoiser_forward(g, p, x_t, &draw.t, cond);
    let target = g.constant(draw.eps);
    Ok(g.mse(pred, target))
}

/// Ancestral sampling of `n` images conditioned on one vector `cond`.
///
/// Returns `n` tensors `[C, H, W]` clamped to `[-1, 1]`.
pub fn sample(
    model: &impl NoisePredictor,
    shape: [usize; 3],
    schedule: &NoiseSchedule,
    cond: &Tensor,
    seed: u64,
    n: usize,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(DiffusionError::InvalidArgument(
            "sample count must be >= 1".into(),
        ));
    }
    let d: usize = shape.iter().product();
    let mut r = rng::stream(seed, rng::label("diffusion.sample"));
    let batch_shape = [n, shape[0], shape[1], shape[2]];
    let mut x = Tensor::new(&batch_shape, rng::normal_vec(&mut r, n * d))?;
    let conds = Tensor::stack(&vec![cond.clone(); n])?;
    for t in (0..schedule.steps()).rev() {
        let eps = model.predict(&x, &vec![t; n], &conds)?;
        let (alpha, beta, ab) = (schedule.alpha[t], schedule.beta[t], schedule.alpha_bar[t]);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        let z = if t > 0 {
            rng::normal_vec(&mut r, n * d)
        } else {
            vec![0.0; n * d]
        };
        for ((xv, e), zv) in x.data_mut().iter_mut().zip(eps.data()).zip(&z) {
            *xv = inv * (*xv - coef * e) + sigma * zv;
        }
    }
    Ok((0..n)
        .map(|i| x.slice_leading(i).map(|v| v.clamp(-1.0, 1.0)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            channels: 1,
            height: 4,
            width: 4,
            base_channels: 2,
            time_dim: 4,
            cond_dim: 2,
            emb_dim: 4,
        }
    }

    #[test]
    fn schedule_rejects_zero_steps() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 0).is_err());
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.beta()[0], 1e-4);
        assert!((s.beta()[999] - 2e-2).abs() < 1e-15);
        let one = NoiseSchedule::new(ScheduleKind::Linear, 1).unwrap();
        assert_eq!(one.beta(), &[1e-4]);
    }

    #[test]
    fn forward_noise_boundaries_are_exact() {
        let x0 = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let eps = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        assert_eq!(forward_noise_with(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(forward_noise_with(&x0, &eps, 0.0).unwrap(), eps);
    }

    #[test]
    fn forward_noise_validates() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 10).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(forward_noise(&x, 10, &x, &s).is_err());
        assert!(forward_noise(&x, 0, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn tiny_denoiser_has_431_params() {
        assert_eq!(DenoiserParams::init(tiny(), 0).unwrap().num_params(), 431);
    }

    #[test]
    fn zero_network_predicts_zero() {
        let p = DenoiserParams::zeros(tiny()).unwrap();
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.1);
        let out = predict_eps(
            &p,
            &x.clone().reshape(&[1, 4, 4]).unwrap(),
            3,
            &Tensor::full(&[2], 0.5),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[1, 4, 4]);
    }

    #[test]
    fn predict_rejects_bad_shapes() {
        let p = DenoiserParams::init(tiny(), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 6]);
        assert!(p.predict(&x, &[0], &Tensor::zeros(&[1, 2])).is_err());
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(p.predict(&x, &[0], &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = DenoiserParams::init(tiny(), 0).unwrap();
        let s = NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap();
        let err = loss_simple(
            &p,
            &Tensor::zeros(&[0, 1, 4, 4]),
            &Tensor::zeros(&[0, 2]),
            &s,
            0,
        );
        assert!(matches!(err, Err(DiffusionError::InvalidArgument(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DenoiserParams::init(tiny(), 5).unwrap();
        let sc = ScheduleConfig {
            kind: ScheduleKind::Cosine,
            steps: 50,
        };
        let ck = Checkpoint::from_bytes(&p.to_checkpoint(sc).to_bytes().unwrap()).unwrap();
        let (q, sc2) = DenoiserParams::from_checkpoint(&ck).unwrap();
        assert_eq!(q, p);
        assert_eq!(sc2, sc);
    }
}
