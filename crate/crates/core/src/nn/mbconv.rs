//! Inverted residual block: pointwise expansion, depthwise convolution,
//! squeeze-and-excitation, linear pointwise projection, optional skip.
//! ReLU throughout and no batch normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConvLayer, DepthwiseLayer, SeBlock, SeConfig, SeVariant};
use crate::error::{invalid, Result};
use crate::tensor::{ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion_ratio: usize,
    pub kernel_size: usize,
    pub stride: usize,
    /// SE bottleneck as a fraction of `in_channels`.
    pub se_fraction: f64,
    #[serde(default)]
    pub se_variant: SeVariant,
}

impl MbConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion_ratio == 0 {
            return Err(invalid!("MBConv channels and expansion must be positive: {self:?}"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid!("MBConv kernel {} must be odd", self.kernel_size));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(invalid!("MBConv stride {} must be 1 or 2", self.stride));
        }
        if !(self.se_fraction > 0.0 && self.se_fraction <= 1.0) {
            return Err(invalid!("SE fraction {} must lie in (0, 1]", self.se_fraction));
        }
        Ok(())
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn expanded_channels(&self) -> usize {
        self.in_channels * self.expansion_ratio
    }

    pub fn se_config(&self) -> SeConfig {
        let m = ((self.in_channels as f64 * self.se_fraction) as usize).max(1);
        SeConfig {
            bottleneck: m.min(self.expanded_channels()),
            variant: self.se_variant,
            ..SeConfig::new(self.expanded_channels())
        }
    }

    pub fn num_params(&self) -> usize {
        let (ci, co, ce, k) = (
            self.in_channels,
            self.out_channels,
            self.expanded_channels(),
            self.kernel_size,
        );
        let expand = if self.expansion_ratio != 1 { ci * ce + ce } else { 0 };
        expand + k * k * ce + ce + self.se_config().num_params() + ce * co + co
    }
}

#[derive(Clone, Debug)]
pub struct MbConv {
    pub cfg: MbConvConfig,
    pub expand: Option<ConvLayer>,
    pub depthwise: DepthwiseLayer,
    pub se: SeBlock,
    pub project: ConvLayer,
}

impl MbConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: MbConvConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ce = cfg.expanded_channels();
        let expand = if cfg.expansion_ratio != 1 {
            Some(ConvLayer::new(store, &format!("{name}.expand"), 1, cfg.in_channels, ce, 1, rng)?)
        } else {
            None
        };
        let depthwise = DepthwiseLayer::new(
            store,
            &format!("{name}.depthwise"),
            cfg.kernel_size,
            ce,
            cfg.stride,
            rng,
        )?;
        let se = SeBlock::new(store, &format!("{name}.se"), cfg.se_config(), rng)?;
        let project = ConvLayer::new(store, &format!("{name}.project"), 1, ce, cfg.out_channels, 1, rng)?;
        Ok(MbConv {
            cfg,
            expand,
            depthwise,
            se,
            project,
        })
    }

    /// Everything except the skip connection.
    pub fn inner<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(expand) = &self.expand {
            h = expand.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        h = self.depthwise.forward(tape, store, h)?;
        h = tape.relu(h);
        h = self.se.forward(tape, store, h)?;
        self.project.forward(tape, store, h)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let inner = self.inner(tape, store, x)?;
        if self.cfg.has_skip() {
            tape.add(x, inner)
        } else {
            Ok(inner)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn cfg(cin: usize, cout: usize, exp: usize, stride: usize) -> MbConvConfig {
        MbConvConfig {
            in_channels: cin,
            out_channels: cout,
            expansion_ratio: exp,
            kernel_size: 3,
            stride,
            se_fraction: 0.25,
            se_variant: SeVariant::FcSigmoid,
        }
    }

    fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn skip_added_only_for_stride_one_and_matching_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let c = cfg(8, 8, 1, 1);
        assert!(c.has_skip());
        let block = MbConv::new(&mut store, "b", c, &mut rng).unwrap();
        let x = input(&[1, 6, 6, 8], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let inner = block.inner(&mut tape, &store, xv).unwrap();
        let out = block.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.shape(out), x.shape());
        for ((&o, &i), &xi) in tape.value(out).data().iter().zip(tape.value(inner).data()).zip(x.data()) {
            assert_eq!(o, xi + i);
        }

        assert!(!cfg(8, 16, 6, 1).has_skip());
        assert!(!cfg(8, 8, 6, 2).has_skip());
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = MbConv::new(&mut store, "b", cfg(4, 4, 6, 2), &mut rng).unwrap();
        let x = input(&[2, 7, 6, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = block.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.shape(out), &[2, 4, 3, 4]);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // in=16, out=16, k=3, expansion 6 (96 channels), SE bottleneck 4:
        // expand 16*96+96, depthwise 9*96+96, SE 96*4+4+4*96+96, project 96*16+16
        let hand = (16 * 96 + 96) + (9 * 96 + 96) + (96 * 4 + 4 + 4 * 96 + 96) + (96 * 16 + 16);
        assert_eq!(hand, 5012);
        let c = cfg(16, 16, 6, 1);
        assert_eq!(c.se_config().bottleneck, 4);
        assert_eq!(c.num_params(), hand);
        let mut store = ParamStore::<f32>::new();
        MbConv::new(&mut store, "b", c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.num_scalars(), hand);
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(4, 4, 6, 3).validate().is_err());
        assert!(MbConvConfig { kernel_size: 4, ..cfg(4, 4, 6, 1) }.validate().is_err());
        assert!(cfg(0, 4, 6, 1).validate().is_err());
    }
}
