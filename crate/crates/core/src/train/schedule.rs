use serde::{Deserialize, Serialize};

/// Reduce-on-plateau learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    #[serde(skip)]
    pub best: f64,
    #[serde(skip)]
    pub wait: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            factor: 0.2,
            patience: 4,
            min_delta: 1e-5,
            min_lr: 1e-7,
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

impl PlateauSchedule {
    /// Feeds one epoch's validation loss and returns the new learning rate.
    /// The rate drops once the count of epochs without improvement exceeds
    /// the patience, and the count restarts.
    pub fn step(&mut self, lr: f64, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait > self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    #[serde(skip)]
    pub best: f64,
    #[serde(skip)]
    pub wait: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 9,
            min_delta: 1e-5,
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

impl EarlyStop {
    /// Stops after `patience` consecutive epochs without improvement.
    pub fn step(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
            return StopDecision::Continue;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
