use std::path::Path;
use std::sync::atomic::AtomicBool;

use dsrnet::data::{make_pairs, save_png, Image, PatchSampler};
use dsrnet::optim::LrSchedule;
use dsrnet::train::{checkpoint_path, train, train_step, TrainConfig, TrainState};
use dsrnet::{Error, ModelConfig, Rng};

fn small_model() -> ModelConfig {
    ModelConfig {
        scale: 2,
        width: 8,
        ..ModelConfig::default()
    }
}

fn smooth_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let (fx, fy, ph) = (0.2 + 0.3 * rng.uniform(), 0.1 + 0.3 * rng.uniform(), 6.0 * rng.uniform());
    Image::from_fn(w, h, 3, |c, y, x| {
        0.5 + 0.35 * ((x as f64 * fx + ph + c as f64).sin() * (y as f64 * fy).cos())
    })
    .quantize()
}

fn image_dir(n: usize, side: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..n {
        save_png(&smooth_image(side, side, i as u64), dir.path().join(format!("img{i}.png"))).unwrap();
    }
    dir
}

fn config(train_dir: &Path, out_dir: &Path, steps: u64) -> TrainConfig {
    TrainConfig {
        model: small_model(),
        train_dir: train_dir.to_path_buf(),
        out_dir: out_dir.to_path_buf(),
        steps,
        batch: 2,
        patch: 16,
        schedule: LrSchedule {
            initial: 1e-3,
            half_every: 4,
        },
        seed: 5,
        checkpoint_every: 1000,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_single_patch() {
    let dir = image_dir(1, 32);
    let pairs = make_pairs(dir.path(), 2, None).unwrap();
    let sampler = PatchSampler::new(&pairs, 32).unwrap();
    let mut state = TrainState::<f32>::fresh(small_model(), 0).unwrap();
    let schedule = LrSchedule {
        initial: 1e-3,
        half_every: 1_000_000,
    };
    let losses: Vec<f64> = (0..200)
        .map(|_| train_step(&mut state, &sampler, 1, &schedule, 0).unwrap().loss)
        .collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
    assert_eq!(state.step, 200);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = image_dir(3, 24);
    let straight = tempfile::tempdir().unwrap();
    let whole = train::<f32>(&config(data.path(), straight.path(), 6), None).unwrap();
    assert_eq!(whole.steps_done, 6);

    let split = tempfile::tempdir().unwrap();
    let first = train::<f32>(&config(data.path(), split.path(), 3), None).unwrap();
    assert_eq!(first.final_checkpoint, checkpoint_path(split.path(), 3));
    let mut rest = config(data.path(), split.path(), 6);
    rest.resume = Some(first.final_checkpoint.clone());
    let second = train::<f32>(&rest, None).unwrap();

    assert_eq!(second.records[0].loss, whole.records[3].loss);
    assert_eq!(second.records.last(), whole.records.last());
    let a = std::fs::read(&whole.final_checkpoint).unwrap();
    let b = std::fs::read(&second.final_checkpoint).unwrap();
    assert!(a == b, "resumed checkpoint differs");

    // the log keeps one header and one line per step across the resume
    let log = std::fs::read_to_string(split.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(log.starts_with("step,lr,loss,routed_fraction"));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = image_dir(2, 24);
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            let o = train::<f32>(&config(data.path(), out.path(), 4), None).unwrap();
            std::fs::read(o.final_checkpoint).unwrap()
        })
        .collect();
    assert!(runs[0] == runs[1]);

    let out = tempfile::tempdir().unwrap();
    let mut other = config(data.path(), out.path(), 4);
    other.seed = 6;
    let o = train::<f32>(&other, None).unwrap();
    assert!(std::fs::read(o.final_checkpoint).unwrap() != runs[0]);
}

#[test]
fn zero_steps_still_writes_a_checkpoint() {
    let data = image_dir(1, 24);
    let out = tempfile::tempdir().unwrap();
    let o = train::<f32>(&config(data.path(), out.path(), 0), None).unwrap();
    assert_eq!(o.steps_done, 0);
    assert!(o.records.is_empty());
    let state = TrainState::<f32>::load(checkpoint_path(out.path(), 0)).unwrap();
    assert_eq!(state.step, 0);
    assert_eq!(state, TrainState::fresh(small_model(), 5).unwrap());
}

#[test]
fn periodic_checkpoints_and_interrupt() {
    let data = image_dir(2, 24);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config(data.path(), out.path(), 5);
    cfg.checkpoint_every = 2;
    train::<f32>(&cfg, None).unwrap();
    for step in [2, 4, 5] {
        assert!(checkpoint_path(out.path(), step).exists(), "step {step}");
    }
    assert!(!checkpoint_path(out.path(), 3).exists());

    let out = tempfile::tempdir().unwrap();
    let stop = AtomicBool::new(true);
    let o = train::<f32>(&config(data.path(), out.path(), 50), Some(&stop)).unwrap();
    assert!(o.interrupted);
    assert_eq!(o.steps_done, 1);
    assert_eq!(TrainState::<f32>::load(o.final_checkpoint).unwrap().step, 1);
}

#[test]
fn resume_rejects_a_different_model() {
    let data = image_dir(1, 24);
    let out = tempfile::tempdir().unwrap();
    let o = train::<f32>(&config(data.path(), out.path(), 1), None).unwrap();
    let mut cfg = config(data.path(), out.path(), 2);
    cfg.model.width = 16;
    cfg.resume = Some(o.final_checkpoint);
    assert!(matches!(train::<f32>(&cfg, None), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_stops_training() {
    let dir = image_dir(1, 24);
    let pairs = make_pairs(dir.path(), 2, None).unwrap();
    let sampler = PatchSampler::new(&pairs, 16).unwrap();
    let mut state = TrainState::<f32>::fresh(small_model(), 0).unwrap();
    let rb = state
        .model
        .params_mut()
        .layers_mut()
        .iter_mut()
        .find(|l| l.name == "rb2")
        .unwrap();
    rb.bias.value.data_mut()[0] = f32::NAN;
    let err = train_step(&mut state, &sampler, 1, &LrSchedule::default(), 0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(state.step, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = image_dir(1, 24);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config(data.path(), out.path(), 1);
    cfg.patch = 4;
    assert!(matches!(train::<f32>(&cfg, None), Err(Error::Config(_))));
    let mut cfg = config(data.path(), out.path(), 1);
    cfg.batch = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

/// Full-width toy run at batch 1 on 32px patches.
#[test]
fn toy_run_reduces_loss() {
    let dir = image_dir(16, 48);
    let pairs = make_pairs(dir.path(), 2, None).unwrap();
    let sampler = PatchSampler::new(&pairs, 32).unwrap();
    let config = ModelConfig::with_scale(2);
    assert_eq!(config.width, 64);
    let mut state = TrainState::<f32>::fresh(config, 1).unwrap();
    let schedule = LrSchedule::default();
    let losses: Vec<f64> = (0..2000)
        .map(|_| train_step(&mut state, &sampler, 1, &schedule, 1).unwrap().loss)
        .collect();
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let (head, tail) = (mean(&losses[..100]), mean(&losses[1900..]));
    assert!(tail < head, "first window {head}, trailing window {tail}");
}
