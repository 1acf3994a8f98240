//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// How many fresh inputs to draw when a perturbation crosses a kink.
pub const GRAD_CHECK_RETRIES: usize = 8;

/// Denominator floor of the relative error, so that components whose true
/// gradient is ~0 are judged on absolute error. Never below the resolution
/// of a central difference in `T`, about `epsilon(T) / eps`.
pub fn rel_err_floor<T: Real>(eps: f64) -> f64 {
    (100.0 * T::epsilon().as_f64() / eps).max(1e-3)
}

/// One evaluation of the function under test.
pub struct Evaluation {
    pub loss: f64,
    /// Analytic gradient per input (may be empty for perturbed evaluations).
    pub grads: Vec<Tensor<f64>>,
    pub fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a
    /// non-differentiable point.
    pub skipped: usize,
    pub resamples: usize,
}

impl GradCheckReport {
    pub fn kink_crossed(&self) -> bool {
        self.skipped > 0
    }
}

fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `eval`'s analytic gradients with central differences, element by
/// element over every input. Perturbed coordinates are rounded to `T` and the
/// step actually taken is used as the divisor.
pub fn check_gradients<T, F>(inputs: &[Tensor<f64>], eps: f64, eval: F) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_gradients_at::<T, F>(inputs, &coords, eps, eval)
}

/// [`check_gradients`] restricted to `(input, element)` coordinates.
/// Coordinates whose perturbation crosses a kink are counted in `skipped`.
pub fn check_gradients_at<T, F>(
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    eps: f64,
    mut eval: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>,
{
    let round = |x: f64| T::lit(x).as_f64();
    let floor = rel_err_floor::<T>(eps);
    let base = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for &(i, j) in coords {
        let x0 = inputs[i].data()[j];
        let (hi, lo) = (round(x0 + eps), round(x0 - eps));
        work[i].data_mut()[j] = hi;
        let plus = eval(&work, false)?;
        work[i].data_mut()[j] = lo;
        let minus = eval(&work, false)?;
        work[i].data_mut()[j] = x0;
        if plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint {
            skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (hi - lo);
        worst = worst.max(relative_error(base.grads[i].data()[j], numeric, floor));
        checked += 1;
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked,
        skipped,
        resamples: 0,
    })
}

/// `sum(out * r)` for a fixed random `r`, so that every output element
/// contributes to the checked scalar.
pub fn projection_loss<T: Real>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.shape(out).to_vec();
    let r = Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))?;
    let r = tape.leaf(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn random_inputs(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    shapes
        .iter()
        .map(|s| Tensor::from_fn(s.clone(), |_| rng.sample(StandardNormal)))
        .collect()
}

/// Builds `op_builder` over random leaves of the given shapes, reduces it
/// with [`projection_loss`] and checks the leaf gradients. Inputs straddling
/// a kink are redrawn up to [`GRAD_CHECK_RETRIES`] times.
pub fn grad_check<T, F>(
    op_builder: F,
    shapes: &[Vec<usize>],
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = None;
    for attempt in 0..=GRAD_CHECK_RETRIES {
        let inputs: Vec<Tensor<f64>> = random_inputs(shapes, &mut rng)?
            .into_iter()
            .map(|t| t.cast::<T>().cast())
            .collect();
        let r = check_gradients::<T, _>(&inputs, eps, |xs, want_grads| {
            let mut tape = Tape::<T>::new();
            let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.cast())).collect();
            let out = op_builder(&mut tape, &leaves)?;
            let loss = projection_loss(&mut tape, out, seed)?;
            let grads = if want_grads {
                let g = tape.backward(loss)?;
                leaves
                    .iter()
                    .map(|&v| match g.get(v) {
                        Some(t) => t.cast(),
                        None => Tensor::zeros(tape.shape(v).to_vec()).expect("valid shape"),
                    })
                    .collect()
            } else {
                Vec::new()
            };
            Ok(Evaluation {
                loss: tape.value(loss).item()?.as_f64(),
                grads,
                fingerprint: tape.kink_fingerprint(),
            })
        })?;
        let done = !r.kink_crossed();
        report = Some(GradCheckReport {
            resamples: attempt,
            ..r
        });
        if done {
            break;
        }
    }
    Ok(report.expect("at least one attempt"))
}
