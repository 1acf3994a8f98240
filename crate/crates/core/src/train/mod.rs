//! Mini-batch training: Adam, plateau schedule, early stopping, checkpoints.

mod adam;
mod checkpoint;
mod schedule;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gz2::{for_each_batch, AugmentationConfig, Batch, Dataset, NUM_CLASSES};
use crate::scaling::Network;
use crate::tensor::{Tape, Tensor, Var};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::{EarlyStop, PlateauSchedule, StopDecision};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Batch-mean categorical cross-entropy against one-hot targets.
    #[default]
    CrossEntropy,
    /// Root of the mean squared error over every output of the batch.
    Rmse,
}

/// Batch size for a preset: 256 for b0-b1, 128 for b2-b3, 64 for b4-b7.
pub fn batch_size_for(preset: &str) -> usize {
    match preset {
        "b0" | "b1" => 256,
        "b2" | "b3" => 128,
        "toy" => 8,
        _ => 64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: String,
    pub epochs: usize,
    /// Defaults to the preset's ladder value.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Share of the training data held out for validation; 0 monitors the
    /// training data itself.
    pub validation_fraction: f64,
    pub augmentation: Option<AugmentationConfig>,
    pub plateau: PlateauSchedule,
    pub early_stop: EarlyStop,
    pub workers: usize,
    pub prefetch: usize,
    /// Where the best checkpoint is written after each improving epoch.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "b0".into(),
            epochs: 50,
            batch_size: None,
            learning_rate: 1.5e-4,
            seed: 0,
            loss: LossKind::CrossEntropy,
            validation_fraction: 0.1,
            augmentation: Some(AugmentationConfig::default()),
            plateau: PlateauSchedule::default(),
            early_stop: EarlyStop::default(),
            workers: 1,
            prefetch: 2,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for a preset. The toy preset trains faster and without
    /// augmentation.
    pub fn for_preset(preset: &str) -> Self {
        let mut cfg = TrainConfig {
            preset: preset.to_string(),
            ..Default::default()
        };
        if preset == "toy" {
            cfg.learning_rate = 3e-3;
            cfg.epochs = 30;
            cfg.augmentation = None;
        }
        cfg
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| batch_size_for(&self.preset))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size() == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation fraction {} not in [0, 1)", self.validation_fraction)));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Running mean over the epoch's batches, in training mode.
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub stopped_early: bool,
}

/// Loss and accuracy of a pass over `data`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

fn batch_loss(tape: &mut Tape<f32>, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => tape.cross_entropy(pred, target),
        LossKind::Rmse => {
            let d = tape.sub(pred, target)?;
            let sq = tape.square(d);
            let mse = tape.mean(sq);
            // Keeps the gradient finite at a perfect fit.
            let shifted = tape.add_scalar(mse, 1e-12);
            tape.sqrt(shifted)
        }
    }
}

fn correct(pred: &[f32], labels: &[Option<u8>], width: usize) -> usize {
    pred.chunks(width)
        .zip(labels)
        .filter(|(row, l)| {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            l.is_some_and(|l| l as usize == arg)
        })
        .count()
}

/// Inference-mode loss (sample-weighted over batches) and accuracy.
pub fn evaluate(net: &Network<f32>, data: &Dataset, kind: LossKind, batch_size: usize, workers: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(invalid!("cannot evaluate on an empty dataset"));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut hits, mut labeled) = (0.0f64, 0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for_each_batch(data, &order, batch_size, None, 0, workers, 0, |b: Batch| {
        let n = b.indices.len();
        let mut tape = Tape::new();
        let x = tape.leaf(b.images);
        let t = tape.leaf(b.targets);
        let y = net.forward(&mut tape, x, false, &mut rng)?;
        let l = batch_loss(&mut tape, kind, y, t)?;
        loss_sum += tape.value(l).item()? as f64 * n as f64;
        let width = tape.shape(y)[1];
        hits += correct(tape.value(y).data(), &b.labels, width);
        labeled += b.labels.iter().filter(|l| l.is_some()).count();
        Ok(())
    })?;
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: (labeled > 0).then(|| hits as f64 / labeled as f64),
    })
}

/// Inference-mode outputs for every sample, `[N, outputs]` in dataset
/// order.
pub fn predict_dataset(net: &Network<f32>, data: &Dataset, batch_size: usize, workers: usize) -> Result<Tensor<f32>> {
    if data.is_empty() {
        return Err(invalid!("cannot predict on an empty dataset"));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut out, mut width) = (Vec::new(), 0);
    for_each_batch(data, &order, batch_size, None, 0, workers, 0, |b: Batch| {
        let y = net.predict(&b.images)?;
        width = y.shape()[1];
        out.extend_from_slice(y.data());
        Ok(())
    })?;
    Tensor::new(vec![data.len(), width], out)
}

/// Stratified, seeded hold-out of `fraction` of each class (at least one
/// sample per class with two or more). Unlabeled samples are split as one
/// group.
pub fn carve_validation(data: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let labels = data.labels();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES + 1];
    for (i, l) in labels.iter().enumerate() {
        groups[l.map_or(NUM_CLASSES, |c| c as usize)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a1d);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = if fraction > 0.0 && g.len() >= 2 {
            ((g.len() as f64 * fraction).round() as usize).clamp(1, g.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains `net` in place and returns the history plus the checkpoint of the
/// epoch with the lowest validation loss.
pub fn fit(net: &mut Network<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid!("training data is empty"));
    }
    let (train_idx, val_idx) = carve_validation(data, cfg.validation_fraction, cfg.seed);
    let train = data.subset(&train_idx);
    let val = if val_idx.is_empty() { train.clone() } else { data.subset(&val_idx) };
    let labels = train.labels();
    for c in 0..NUM_CLASSES as u8 {
        if labels.iter().any(Option::is_some) && !labels.contains(&Some(c)) {
            log::warn!("class {c} has no training samples");
        }
    }

    let batch_size = cfg.batch_size();
    let mut adam = AdamState::new(&net.store);
    let mut plateau = cfg.plateau.clone();
    let mut stopper = cfg.early_stop.clone();
    let mut lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let epoch_seed = cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ 0xd409);
        let (mut loss_sum, mut hits, mut labeled) = (0.0f64, 0usize, 0usize);

        for_each_batch(
            &train,
            &order,
            batch_size,
            cfg.augmentation.as_ref(),
            epoch_seed,
            cfg.workers,
            cfg.prefetch,
            |b| {
                let n = b.indices.len();
                let mut tape = Tape::new();
                let x = tape.leaf(b.images);
                let t = tape.leaf(b.targets);
                let y = net.forward(&mut tape, x, true, &mut dropout_rng)?;
                let l = batch_loss(&mut tape, cfg.loss, y, t)?;
                let value = tape.value(l).item()? as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                net.store.zero_grad();
                tape.backward_into(l, &mut net.store)?;
                adam_step(&mut net.store, &mut adam, lr)?;
                loss_sum += value * n as f64;
                let width = tape.shape(y)[1];
                hits += correct(tape.value(y).data(), &b.labels, width);
                labeled += b.labels.iter().filter(|l| l.is_some()).count();
                Ok(())
            },
        )?;

        let v = evaluate(net, &val, cfg.loss, batch_size, cfg.workers)?;
        if !v.loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: (labeled > 0).then(|| hits as f64 / labeled as f64),
            val_loss: v.loss,
            val_accuracy: v.accuracy,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train loss {:.5} val loss {:.5} val acc {:?}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy
        );
        history.push(record);

        if best.as_ref().is_none_or(|b| v.loss < b.best_val_loss) {
            let c = Checkpoint::capture(net, &adam, epoch as u32, v.loss, lr);
            if let Some(path) = &cfg.checkpoint_path {
                c.save(path)?;
            }
            best = Some(c);
        }
        lr = plateau.step(lr, v.loss);
        if stopper.step(v.loss) == StopDecision::Stop {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(FitOutcome {
        history,
        best: best.expect("at least one epoch ran"),
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
