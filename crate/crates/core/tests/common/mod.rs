#![allow(dead_code)]

pub mod oracle;

use synthvision_core::diffusion::{
    loss_simple_graph, DenoiserConfig, DenoiserParams, NoiseSchedule, ScheduleKind,
};
use synthvision_core::dreambooth::text::{TextEncoder, TextEncoderConfig};
use synthvision_core::dreambooth::{DiffusionModel, Example};
use synthvision_core::manifest::ClassLabel;
use synthvision_core::toy::ToyModality;
use synthvision_core::vit::{vit_forward, LoadedSplit, Mode, ViTConfig, VitParams};
use synthvision_nn::gradcheck::{compare, numeric_gradient};
use synthvision_nn::{rng, BoundParams, Graph, ParamSet, Tensor, Var};

pub const INSTANCE_PROMPT: &str = "a photo of sks wart";
pub const CLASS_PROMPT: &str = "a photo of a wart";

pub fn tiny_denoiser() -> DenoiserConfig {
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

pub fn tiny_model(seed: u64, steps: usize) -> DiffusionModel {
    let dc = tiny_denoiser();
    let text = TextEncoder::new(
        [INSTANCE_PROMPT, CLASS_PROMPT],
        TextEncoderConfig {
            embed_dim: 3,
            cond_dim: dc.cond_dim,
        },
        seed,
    );
    DiffusionModel::new(
        NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap(),
        DenoiserParams::init(dc, seed).unwrap(),
        text,
    )
    .unwrap()
}

/// Random images in `[-1, 1]` with the given prompt.
pub fn examples(n: usize, shape: [usize; 3], prompt: &str, seed: u64) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(rng::derive(seed, i as u64), 0);
            let t = Tensor::randn(&shape, 0.5, &mut r).map(|v| v.clamp(-1.0, 1.0));
            Example {
                image: t,
                prompt: prompt.to_string(),
            }
        })
        .collect()
}

/// Worst relative error between analytic and central-difference gradients
/// of `loss` with respect to every entry of `params`, plus the parameter count.
fn gradcheck(
    params: &ParamSet,
    loss: impl Fn(&ParamSet) -> (Graph, BoundParams, Var),
) -> (usize, f64) {
    let (g, bp, l) = loss(params);
    let grads = g.backward(l);
    let analytic: Vec<f64> = bp
        .collect(&grads)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let numeric = numeric_gradient(&params.flatten(), 1e-5, |x| {
        let mut p = params.clone();
        p.assign_flat(x).unwrap();
        let (g, _, l) = loss(&p);
        g.value(l).item()
    });
    (analytic.len(), compare(&analytic, &numeric, 1e-6).0)
}

/// Gradient check of the noise-prediction loss on the tiny denoiser.
pub fn denoiser_gradcheck() -> (usize, f64) {
    let dc = tiny_denoiser();
    let params = DenoiserParams::init(dc, 11).unwrap();
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap();
    let mut r = rng::stream(4, 0);
    let x0 = Tensor::randn(&[2, 1, 4, 4], 0.6, &mut r);
    let cond = Tensor::randn(&[2, dc.cond_dim], 1.0, &mut r);
    gradcheck(&params.params, |p| {
        let mut g = Graph::new();
        let bp = g.bind(p, true);
        let c = g.constant(cond.clone());
        let l = loss_simple_graph(&mut g, &bp, &x0, c, &schedule, 3).unwrap();
        (g, bp, l)
    })
}

/// Gradient check of the cross-entropy loss on a one-block ViT with
/// 8-dimensional embeddings over three 16x16 toy images.
pub fn vit_gradcheck() -> (usize, f64) {
    let cfg = ViTConfig {
        image_size: 16,
        patch_size: 8,
        channels: 1,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        ..ViTConfig::default()
    };
    let model = VitParams::init(cfg.clone(), 6).unwrap();
    let toy = ToyModality::default();
    let labels = [
        ClassLabel::Positive,
        ClassLabel::Negative,
        ClassLabel::Positive,
    ];
    let images: Vec<Tensor> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| toy.render(l, 10 + i as u64))
        .collect();
    let split = LoadedSplit::from_images(&cfg, &images, &labels).unwrap();
    let x = Tensor::stack(&split.inputs).unwrap();
    gradcheck(&model.params, |p| {
        let mut g = Graph::new();
        let bp = g.bind(p, true);
        let xv = g.constant(x.clone());
        let mut r = rng::stream(0, 0);
        let logits = vit_forward(&mut g, &bp, &cfg, xv, Mode::Eval, &mut r);
        let l = g.cross_entropy(logits, &split.labels);
        (g, bp, l)
    })
}
