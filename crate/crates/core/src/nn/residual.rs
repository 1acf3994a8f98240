use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ConvLayer;
use crate::error::{shape_err, Result};
use crate::tensor::{ParamStore, Real, Tape, Var};

/// Two same-padded `k x k` convolutions with an identity shortcut. Only the
/// identity shortcut is supported; a projection shortcut would change `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualConfig {
    pub channels: usize,
    pub kernel_size: usize,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub cfg: ResidualConfig,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ResidualConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, k) = (cfg.channels, cfg.kernel_size);
        Ok(ResidualBlock {
            cfg,
            conv1: ConvLayer::new(store, &format!("{name}.conv1"), k, c, c, 1, rng)?,
            conv2: ConvLayer::new(store, &format!("{name}.conv2"), k, c, c, 1, rng)?,
        })
    }

    /// Inner path `F(a) = W2 relu(W1 a)`.
    pub fn inner<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, a: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, a)?;
        let h = tape.relu(h);
        self.conv2.forward(tape, store, h)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, a: Var) -> Result<Var> {
        residual_forward(tape, a, |tape, a| self.inner(tape, store, a))
    }
}

/// `relu(a + F(a))` with identity shortcut.
pub fn residual_forward<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    inner: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let f = inner(tape, a)?;
    if tape.shape(f) != tape.shape(a) {
        return Err(shape_err!(
            "residual inner path maps {:?} to {:?}",
            tape.shape(a),
            tape.shape(f)
        ));
    }
    let sum = tape.add(a, f)?;
    Ok(tape.relu(sum))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Padding, Tensor};

    fn block(rng: &mut ChaCha8Rng) -> (ParamStore<f64>, ResidualBlock) {
        let mut store = ParamStore::new();
        let cfg = ResidualConfig {
            channels: 3,
            kernel_size: 3,
        };
        let b = ResidualBlock::new(&mut store, "res", cfg, rng).unwrap();
        (store, b)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_inner_path_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut store, b) = block(&mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.set_value(id, Tensor::zeros(shape).unwrap()).unwrap();
        }
        let a = random(&[1, 4, 4, 3], &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let y = b.forward(&mut tape, &store, av).unwrap();
        let relu: Vec<f64> = a.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y).data(), relu.as_slice());

        // nonnegative input passes through, with unit gradient on the skip
        let pos = a.map(f64::abs);
        let mut tape = Tape::new();
        let pv = tape.leaf(pos.clone());
        let y = b.forward(&mut tape, &store, pv).unwrap();
        assert_eq!(tape.value(y).data(), pos.data());
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(pv).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matches_explicit_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, b) = block(&mut rng);
        let a = random(&[2, 5, 5, 3], &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let y = b.forward(&mut tape, &store, av).unwrap();

        let k1 = tape.leaf(store.get(b.conv1.kernel).value.clone());
        let b1 = tape.leaf(store.get(b.conv1.bias).value.clone());
        let k2 = tape.leaf(store.get(b.conv2.kernel).value.clone());
        let b2 = tape.leaf(store.get(b.conv2.bias).value.clone());
        let h = tape.conv2d(av, k1, Some(b1), 1, Padding::Same).unwrap();
        let h = tape.relu(h);
        let f = tape.conv2d(h, k2, Some(b2), 1, Padding::Same).unwrap();
        let s = tape.add(av, f).unwrap();
        let want = tape.relu(s);
        assert_eq!(tape.value(y).data(), tape.value(want).data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![1, 4, 4, 2]).unwrap());
        let r = residual_forward(&mut tape, a, |tape, a| tape.max_pool(a, 2, 2));
        assert!(matches!(r, Err(crate::Error::Shape(_))));
    }
}
