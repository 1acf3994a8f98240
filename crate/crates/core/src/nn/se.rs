//! Squeeze-and-excitation: global average pool, bottlenecked gate,
//! channel-wise rescale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DenseLayer;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Activation, ParamStore, Real, Tape, Var};

/// How the two bottleneck maps are realized. Both compute the same function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeVariant {
    /// Two dense layers on the pooled `[N, D]` vector.
    #[default]
    FcSigmoid,
    /// Two 1x1 convolutions on a `[N, 1, 1, D]` tensor.
    Pointwise,
}

/// Outer nonlinearity of the excitation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Sigmoid,
    /// ReLU on the outer map, the literal pointwise form. Scales
    /// are then unbounded above.
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeConfig {
    pub channels: usize,
    pub bottleneck: usize,
    #[serde(default)]
    pub variant: SeVariant,
    #[serde(default)]
    pub gate: GateActivation,
}

impl SeConfig {
    /// Default bottleneck `m = D / 4` (at least 1), sigmoid gate.
    pub fn new(channels: usize) -> Self {
        SeConfig {
            channels,
            bottleneck: (channels / 4).max(1),
            variant: SeVariant::default(),
            gate: GateActivation::default(),
        }
    }

    pub fn with_reduction(channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(invalid!("SE reduction ratio must be positive"));
        }
        let cfg = SeConfig {
            bottleneck: channels / ratio,
            ..SeConfig::new(channels)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.bottleneck > self.channels {
            return Err(invalid!(
                "SE bottleneck {} must lie in 1..={}",
                self.bottleneck,
                self.channels
            ));
        }
        Ok(())
    }

    /// `D*m + m + m*D + D`.
    pub fn num_params(&self) -> usize {
        2 * self.channels * self.bottleneck + self.bottleneck + self.channels
    }
}

/// Squeeze: `[N, H, W, D] -> [N, D]` channel means.
pub fn se_squeeze<T: Real>(tape: &mut Tape<T>, u: Var) -> Result<Var> {
    tape.global_avg_pool(u)
}

/// Excitation `s = gate(W2 relu(W1 z + b1) + b2)` for `z: [N, D]`.
/// `w1` is `[D, m]` and `w2` is `[m, D]` for both variants.
pub fn se_excite<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    cfg: &SeConfig,
    (w1, b1): (Var, Var),
    (w2, b2): (Var, Var),
) -> Result<Var> {
    let (d, m) = (cfg.channels, cfg.bottleneck);
    if tape.shape(w1) != [d, m] || tape.shape(w2) != [m, d] {
        return Err(shape_err!(
            "SE weights {:?} / {:?} do not match D={d}, m={m}",
            tape.shape(w1),
            tape.shape(w2)
        ));
    }
    let &[n, zd] = tape.shape(z) else {
        return Err(shape_err!("SE input must be [N, D], got {:?}", tape.shape(z)));
    };
    if zd != d {
        return Err(shape_err!("SE input has {zd} channels, expected {d}"));
    }
    let gate = match cfg.gate {
        GateActivation::Sigmoid => Activation::Sigmoid,
        GateActivation::Relu => Activation::Relu,
    };
    match cfg.variant {
        SeVariant::FcSigmoid => {
            let h = tape.dense(z, w1, b1, Activation::Relu)?;
            tape.dense(h, w2, b2, gate)
        }
        SeVariant::Pointwise => {
            let img = tape.reshape(z, vec![n, 1, 1, d])?;
            let k1 = tape.reshape(w1, vec![1, 1, d, m])?;
            let k2 = tape.reshape(w2, vec![1, 1, m, d])?;
            let h = tape.pointwise_conv(img, k1, Some(b1))?;
            let h = tape.relu(h);
            let s = tape.pointwise_conv(h, k2, Some(b2))?;
            let s = tape.activate(s, gate);
            tape.reshape(s, vec![n, d])
        }
    }
}

/// Rescale: `out[.., i] = s_i * u[.., i]`.
pub fn se_scale<T: Real>(tape: &mut Tape<T>, u: Var, s: Var) -> Result<Var> {
    tape.channel_scale(u, s)
}

/// SE unit with its own parameters.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub cfg: SeConfig,
    pub reduce: DenseLayer,
    pub expand: DenseLayer,
}

impl SeBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: SeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let reduce = DenseLayer::new(store, &format!("{name}.reduce"), cfg.channels, cfg.bottleneck, rng)?;
        let expand = DenseLayer::new(store, &format!("{name}.expand"), cfg.bottleneck, cfg.channels, rng)?;
        Ok(SeBlock {
            cfg,
            reduce,
            expand,
        })
    }

    /// Channel scales `s: [N, D]` for feature map `u`.
    pub fn excitation<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        u: Var,
    ) -> Result<Var> {
        let z = se_squeeze(tape, u)?;
        let w1 = tape.param(store, self.reduce.weight);
        let b1 = tape.param(store, self.reduce.bias);
        let w2 = tape.param(store, self.expand.weight);
        let b2 = tape.param(store, self.expand.bias);
        se_excite(tape, z, &self.cfg, (w1, b1), (w2, b2))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, u: Var) -> Result<Var> {
        let s = self.excitation(tape, store, u)?;
        se_scale(tape, u, s)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn squeeze_examples() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..9).flat_map(|_| [3.0, -1.0]).collect();
        let u = tape.leaf(Tensor::new(vec![1, 3, 3, 2], data).unwrap());
        let z = se_squeeze(&mut tape, u).unwrap();
        assert_eq!(tape.value(z).data(), &[3.0, -1.0]);

        let u = tape.leaf(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = se_squeeze(&mut tape, u).unwrap();
        assert_eq!(tape.value(z).data(), &[2.5]);
    }

    #[test]
    fn zero_weights_give_half_gate() {
        let cfg = SeConfig::new(8);
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::ones(vec![2, 8]).unwrap());
        let w1 = tape.leaf(Tensor::zeros(vec![8, 2]).unwrap());
        let b1 = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        let w2 = tape.leaf(Tensor::zeros(vec![2, 8]).unwrap());
        let b2 = tape.leaf(Tensor::zeros(vec![8]).unwrap());
        let s = se_excite(&mut tape, z, &cfg, (w1, b1), (w2, b2)).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
        // mismatched bottleneck
        let bad = SeConfig { bottleneck: 3, ..cfg };
        assert!(matches!(
            se_excite(&mut tape, z, &bad, (w1, b1), (w2, b2)),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn parameter_count_d16_m4() {
        let cfg = SeConfig::with_reduction(16, 4).unwrap();
        assert_eq!(cfg.bottleneck, 4);
        // 16*4 + 4 + 4*16 + 16
        assert_eq!(cfg.num_params(), 148);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        SeBlock::new(&mut store, "se", cfg, &mut rng).unwrap();
        assert_eq!(store.num_scalars(), 148);
    }

    #[test]
    fn variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fc = SeConfig::new(12);
        let pw = SeConfig {
            variant: SeVariant::Pointwise,
            ..fc
        };
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(random(&[3, 12], &mut rng));
        let w1 = tape.leaf(random(&[12, 3], &mut rng));
        let b1 = tape.leaf(random(&[3], &mut rng));
        let w2 = tape.leaf(random(&[3, 12], &mut rng));
        let b2 = tape.leaf(random(&[12], &mut rng));
        let a = se_excite(&mut tape, z, &fc, (w1, b1), (w2, b2)).unwrap();
        let b = se_excite(&mut tape, z, &pw, (w1, b1), (w2, b2)).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn scale_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random(&[1, 3, 3, 4], &mut rng);
        let mut tape = Tape::<f64>::new();
        let uv = tape.leaf(u.clone());
        let ones = tape.leaf(Tensor::ones(vec![1, 4]).unwrap());
        let y = se_scale(&mut tape, uv, ones).unwrap();
        assert_eq!(tape.value(y).data(), u.data());
        let zeros = tape.leaf(Tensor::zeros(vec![1, 4]).unwrap());
        let y = se_scale(&mut tape, uv, zeros).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let short = tape.leaf(Tensor::ones(vec![1, 3]).unwrap());
        assert!(se_scale(&mut tape, uv, short).is_err());
    }

    #[test]
    fn sigmoid_gate_never_amplifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let block = SeBlock::new(&mut store, "se", SeConfig::new(8), &mut rng).unwrap();
        for _ in 0..20 {
            let u = random(&[2, 4, 4, 8], &mut rng).map(|v| v * 10.0);
            let mut tape = Tape::new();
            let uv = tape.leaf(u.clone());
            let s = block.excitation(&mut tape, &store, uv).unwrap();
            assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
            let y = se_scale(&mut tape, uv, s).unwrap();
            assert!(tape.value(y).max_abs() <= u.max_abs());
        }
    }

    #[test]
    fn relu_gate_is_unbounded() {
        let cfg = SeConfig {
            gate: GateActivation::Relu,
            ..SeConfig::new(4)
        };
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::ones(vec![1, 4]).unwrap());
        let w1 = tape.leaf(Tensor::ones(vec![4, 1]).unwrap());
        let b1 = tape.leaf(Tensor::zeros(vec![1]).unwrap());
        let w2 = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let b2 = tape.leaf(Tensor::zeros(vec![4]).unwrap());
        let s = se_excite(&mut tape, z, &cfg, (w1, b1), (w2, b2)).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 0.0, 2.0, 8.0]);
    }
}
