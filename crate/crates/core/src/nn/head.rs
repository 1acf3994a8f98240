//! Tail of every network: GAP -> dropout -> FC(64, ReLU) -> output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DenseLayer;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Activation, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Softmax over the classes.
    Classify,
    /// Independent sigmoids, one per vote fraction.
    Regress,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub mode: HeadMode,
    pub outputs: usize,
}

impl HeadConfig {
    pub fn classification() -> Self {
        HeadConfig {
            hidden_units: 64,
            dropout_rate: 0.5,
            mode: HeadMode::Classify,
            outputs: crate::gz2::NUM_CLASSES,
        }
    }

    pub fn regression() -> Self {
        HeadConfig {
            hidden_units: 64,
            dropout_rate: 0.5,
            mode: HeadMode::Regress,
            outputs: crate::gz2::NUM_ANSWERS,
        }
    }

    pub fn for_mode(mode: HeadMode) -> Self {
        match mode {
            HeadMode::Classify => Self::classification(),
            HeadMode::Regress => Self::regression(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.outputs == 0 {
            return Err(invalid!("head needs positive hidden units and outputs"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid!("head dropout {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn output_activation(&self) -> Activation {
        match self.mode {
            HeadMode::Classify => Activation::Softmax,
            HeadMode::Regress => Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    pub in_channels: usize,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl Head {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Head {
            cfg,
            in_channels,
            hidden: DenseLayer::new(store, &format!("{name}.fc"), in_channels, cfg.hidden_units, rng)?,
            output: DenseLayer::new(store, &format!("{name}.out"), cfg.hidden_units, cfg.outputs, rng)?,
        })
    }

    /// `features: [N, H, W, C] -> [N, outputs]`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let c = tape.shape(features).last().copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(shape_err!("head expects {} channels, got {c}", self.in_channels));
        }
        let pooled = tape.global_avg_pool(features)?;
        let dropped = tape.dropout(pooled, self.cfg.dropout_rate, training, rng)?;
        let hidden = self.hidden.forward(tape, store, dropped, Activation::Relu)?;
        self.output.forward(tape, store, hidden, self.cfg.output_activation())
    }
}
