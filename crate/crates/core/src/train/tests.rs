use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gz2::synthetic_set;
use crate::scaling::{build_network, ScaledArch};

fn tiny_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        preset: "toy".into(),
        epochs,
        batch_size: Some(8),
        learning_rate: lr,
        seed: 11,
        augmentation: None,
        validation_fraction: 0.2,
        ..Default::default()
    }
}

fn setup() -> (Network<f32>, Dataset) {
    let mut arch = ScaledArch::toy();
    arch.resolution = 16;
    let net = build_network(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    (net, Dataset::from_images(synthetic_set(28, 16, 4).unwrap()))
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (mut net, data) = setup();
    let before = net.store.clone();
    let out = fit(&mut net, &data, &tiny_config(3, 0.0)).unwrap();
    assert_eq!(net.store.iter().map(|p| &p.value).collect::<Vec<_>>(), before.iter().map(|p| &p.value).collect::<Vec<_>>());
    let v: Vec<f64> = out.history.iter().map(|r| r.val_loss).collect();
    assert!(v.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn same_seed_same_history_and_checkpoint() {
    let run = || {
        let (mut net, data) = setup();
        let mut cfg = tiny_config(3, 3e-3);
        cfg.augmentation = Some(AugmentationConfig::default());
        fit(&mut net, &data, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
}

#[test]
fn best_checkpoint_has_lowest_validation_loss() {
    let (mut net, data) = setup();
    let out = fit(&mut net, &data, &tiny_config(4, 3e-3)).unwrap();
    let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.best_val_loss, min);
    assert!(out.history.iter().all(|r| out.best.best_val_loss <= r.val_loss));
    let record = &out.history[out.best.epoch as usize - 1];
    assert_eq!(record.val_loss, out.best.best_val_loss);
}

#[test]
fn checkpoint_file_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let (mut net, data) = setup();
    let mut cfg = tiny_config(2, 1e-3);
    cfg.checkpoint_path = Some(dir.path().join("best.mnet"));
    let out = fit(&mut net, &data, &cfg).unwrap();
    assert_eq!(Checkpoint::load(&dir.path().join("best.mnet")).unwrap(), out.best);
}

#[test]
fn validation_carve_is_stratified() {
    let data = Dataset::from_images(synthetic_set(70, 8, 1).unwrap());
    let (train, val) = carve_validation(&data, 0.1, 5);
    assert_eq!(train.len() + val.len(), 70);
    assert_eq!(val.len(), 7);
    let labels = data.labels();
    for c in 0..7u8 {
        assert_eq!(val.iter().filter(|&&i| labels[i] == Some(c)).count(), 1);
    }
    assert_eq!(carve_validation(&data, 0.1, 5), (train, val));
    assert!(carve_validation(&data, 0.0, 5).1.is_empty());
}

#[test]
fn rmse_loss_trains_on_fractions() {
    let (mut net, mut data) = setup();
    net = {
        let mut arch = net.arch.clone();
        arch.head = crate::nn::HeadConfig::regression();
        build_network(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    };
    for (i, s) in data.samples.iter_mut().enumerate() {
        s.target = crate::gz2::Target::Fractions((0..37).map(|j| ((i + j) % 5) as f32 / 5.0).collect());
    }
    let mut cfg = tiny_config(2, 1e-3);
    cfg.loss = LossKind::Rmse;
    let out = fit(&mut net, &data, &cfg).unwrap();
    assert!(out.history.iter().all(|r| r.val_accuracy.is_none() && r.val_loss > 0.0 && r.val_loss < 1.0));
}

#[test]
fn invalid_configs() {
    let (mut net, data) = setup();
    for cfg in [
        TrainConfig { epochs: 0, ..tiny_config(1, 1e-3) },
        TrainConfig { learning_rate: -1.0, ..tiny_config(1, 1e-3) },
        TrainConfig { validation_fraction: 1.0, ..tiny_config(1, 1e-3) },
    ] {
        assert!(matches!(fit(&mut net, &data, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn batched_prediction_matches_single_pass() {
    let (net, data) = setup();
    let all = predict_dataset(&net, &data, 3, 2).unwrap();
    assert_eq!(all.shape(), &[data.len(), 7]);
    let one = predict_dataset(&net, &data.subset(&[4]), 1, 1).unwrap();
    assert_eq!(&all.data()[4 * 7..5 * 7], one.data());
}
