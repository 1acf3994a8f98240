use rand::Rng;

use crate::error::Result;
use crate::tensor::{he_init, Activation, ParamId, ParamStore, Padding, Real, Tape, Tensor, Var};

/// `k x k` convolution with bias, He-initialized.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.kernel"),
            he_init(vec![k, k, c_in, c_out], k * k * c_in, rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out])?)?;
        Ok(ConvLayer {
            kernel,
            bias,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, Some(b), self.stride, Padding::Same)
    }
}

/// Per-channel `k x k` convolution with bias.
#[derive(Clone, Debug)]
pub struct DepthwiseLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl DepthwiseLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.kernel"),
            he_init(vec![k, k, channels], k * k, rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![channels])?)?;
        Ok(DepthwiseLayer {
            kernel,
            bias,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.depthwise_conv2d(x, k, Some(b), self.stride, Padding::Same)
    }
}

/// Fully connected `[in] -> [out]` with bias.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_init(vec![n_in, n_out], n_in, rng)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![n_out])?)?;
        Ok(DenseLayer { weight, bias })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, b, act)
    }
}
