mod common;

use synthvision_core::dreambooth::superres::{
    pair_loss, superres_finetune, SuperResConfig, Upsampler,
};
use synthvision_core::dreambooth::{
    batch_indices, finetune, DiffusionModel, FineTuneConfig, InstanceSet, PriorSet,
    FINAL_CHECKPOINT,
};
use synthvision_core::imaging;
use synthvision_nn::optim::OptimizerKind;
use synthvision_nn::{rng, Tensor};

fn setup(seed: u64) -> (DiffusionModel, InstanceSet, PriorSet) {
    let base = common::tiny_model(seed, 10);
    let shape = base.image_shape();
    let inst = InstanceSet::new(
        "sks",
        common::examples(3, shape, common::INSTANCE_PROMPT, seed),
    )
    .unwrap();
    let mut prior = PriorSet::empty(common::CLASS_PROMPT);
    prior.examples = common::examples(4, shape, common::CLASS_PROMPT, seed + 1);
    prior.seeds = vec![0; 4];
    (base, inst, prior)
}

fn desk(steps: usize, every: usize) -> FineTuneConfig {
    FineTuneConfig {
        unet_steps: steps,
        unet_lr: 1e-3,
        text_steps: 3,
        text_lr: 1e-3,
        resolution: 4,
        checkpoint_every: every,
        prior_set_size: 4,
        optimizer: OptimizerKind::Adam,
        ..FineTuneConfig::default()
    }
}

#[test]
fn default_cadence_writes_four_checkpoints() {
    let (base, inst, prior) = setup(0);
    let cfg = FineTuneConfig {
        resolution: 4,
        ..FineTuneConfig::default()
    };
    assert_eq!((cfg.unet_steps, cfg.checkpoint_every), (2000, 500));
    let dir = tempfile::tempdir().unwrap();
    let out = finetune(&cfg, &inst, &prior, &base, dir.path()).unwrap();
    let steps: Vec<usize> = out.checkpoints.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![500, 1000, 1500, 2000]);
    for s in &steps {
        assert!(dir.path().join(format!("ckpt_step{s}.bin")).exists());
    }
    assert_eq!(
        std::fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(dir.path().join("ckpt_step2000.bin")).unwrap()
    );
    assert_eq!(out.history.len(), 2000);
}

#[test]
fn uneven_cadence_adds_the_last_step() {
    let cfg = desk(7, 3);
    assert_eq!(cfg.checkpoint_steps(), vec![3, 6, 7]);
    assert_eq!(desk(5, 10).checkpoint_steps(), vec![5]);
}

#[test]
fn run_json_echoes_the_configuration() {
    let (base, inst, prior) = setup(1);
    let cfg = desk(4, 2);
    let dir = tempfile::tempdir().unwrap();
    finetune(&cfg, &inst, &prior, &base, dir.path()).unwrap();
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run.json")).unwrap()).unwrap();
    let echoed: FineTuneConfig = serde_json::from_value(run["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,loss,instance_loss,prior_loss\n"));
}

#[test]
fn text_encoder_is_frozen_after_text_steps() {
    let (base, inst, prior) = setup(2);
    let dir = tempfile::tempdir().unwrap();
    let at = |steps| {
        let cfg = FineTuneConfig {
            checkpoint_every: 100,
            ..desk(steps, 100)
        };
        finetune(&cfg, &inst, &prior, &base, dir.path())
            .unwrap()
            .model
    };
    let (m3, m6) = (at(3), at(6));
    assert_ne!(m3.text.params, base.text.params);
    assert_eq!(m3.text.params, m6.text.params);
    assert_ne!(m3.denoiser.params, m6.denoiser.params);
}

#[test]
fn finetune_is_deterministic_and_reloadable() {
    let (base, inst, prior) = setup(3);
    let cfg = desk(5, 5);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = finetune(&cfg, &inst, &prior, &base, d1.path()).unwrap();
    let b = finetune(&cfg, &inst, &prior, &base, d2.path()).unwrap();
    assert_eq!(a.history, b.history);
    let loaded = DiffusionModel::load(&a.final_checkpoint).unwrap();
    assert_eq!(loaded.denoiser.params, a.model.denoiser.params);
    assert_eq!(
        loaded.sample_one("a photo of sks wart", 1).unwrap(),
        a.model.sample_one("a photo of sks wart", 1).unwrap()
    );
}

#[test]
fn zero_prior_weight_ignores_the_prior_set() {
    let (base, inst, prior) = setup(4);
    let cfg = FineTuneConfig {
        prior_weight: 0.0,
        ..desk(3, 3)
    };
    let dir = tempfile::tempdir().unwrap();
    let with = finetune(&cfg, &inst, &prior, &base, dir.path()).unwrap();
    let without = finetune(
        &cfg,
        &inst,
        &PriorSet::empty(common::CLASS_PROMPT),
        &base,
        dir.path(),
    )
    .unwrap();
    assert_eq!(with.history, without.history);
    assert!(with
        .history
        .iter()
        .all(|h| h.prior_loss.is_none() && h.loss == h.instance_loss));
}

#[test]
fn invalid_inputs_are_rejected() {
    let (base, inst, prior) = setup(5);
    let dir = tempfile::tempdir().unwrap();
    let empty = PriorSet::empty(common::CLASS_PROMPT);
    assert!(finetune(&desk(2, 1), &inst, &empty, &base, dir.path()).is_err());
    let wrong_res = FineTuneConfig {
        resolution: 8,
        ..desk(2, 1)
    };
    assert!(finetune(&wrong_res, &inst, &prior, &base, dir.path()).is_err());
    let unknown_id = FineTuneConfig {
        identifier: "zqx".into(),
        ..desk(2, 1)
    };
    assert!(finetune(&unknown_id, &inst, &prior, &base, dir.path()).is_err());
    let twice = common::examples(1, base.image_shape(), "sks sks wart", 0);
    assert!(InstanceSet::new("sks", twice).is_err());
    let none = common::examples(1, base.image_shape(), "a photo of a wart", 0);
    assert!(InstanceSet::new("sks", none).is_err());
}

#[test]
fn batch_indices_stay_in_range_and_repeat_per_seed() {
    for seed in 0..50u64 {
        let (i, p) = batch_indices(seed, 3, 5, 4);
        assert!(i.iter().all(|&x| x < 3) && p.iter().all(|&x| x < 5));
        assert_eq!((i.clone(), p.clone()), batch_indices(seed, 3, 5, 4));
        assert!(batch_indices(seed, 3, 0, 4).1.is_empty());
    }
}

#[test]
fn instance_directory_loading_resizes_and_reads_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(&[1, 6, 8], |i| (i % 7) as f64 / 7.0);
    imaging::save_png(&dir.path().join("a.png"), &img).unwrap();
    std::fs::write(dir.path().join("a.txt"), "a photo of sks wart\n").unwrap();
    let set = InstanceSet::load_dir(dir.path(), "sks", 1, 4).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.examples[0].image.shape(), [1, 4, 4]);
    assert_eq!(set.examples[0].prompt, "a photo of sks wart");
    std::fs::remove_file(dir.path().join("a.txt")).unwrap();
    assert!(InstanceSet::load_dir(dir.path(), "sks", 1, 4).is_err());
}

#[test]
fn superres_training_reduces_pair_loss() {
    let mut r = rng::stream(8, 0);
    let pairs: Vec<(Tensor, Tensor)> = (0..4)
        .map(|_| {
            let hi = Tensor::randn(&[1, 8, 8], 0.3, &mut r);
            (imaging::downsample(&hi, 2).unwrap(), hi)
        })
        .collect();
    let cfg = SuperResConfig {
        steps: 200,
        seed: 1,
        ..SuperResConfig::default()
    };
    let init = Upsampler::init(1, 2, cfg.hidden, cfg.seed);
    let trained = superres_finetune(&pairs, &cfg).unwrap();
    assert!(pair_loss(&trained, &pairs) < pair_loss(&init, &pairs));
    assert_eq!(trained.apply(&pairs[0].0).shape(), [1, 8, 8]);
}
