use rand::Rng;
use rand_distr::StandardNormal;

use super::{Real, Tensor};
use crate::error::{invalid, Result};

/// He-normal initialization: i.i.d. `N(0, 2 / fan_in)`.
pub fn he_init<T: Real, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(invalid!("he_init: fan_in must be at least 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}
