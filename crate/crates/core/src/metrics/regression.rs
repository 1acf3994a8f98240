use std::fmt;

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionReport {
    pub rmse: f64,
    /// One value per output column.
    pub per_question: Vec<f64>,
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, k] => Ok((n, k)),
        ref s => Err(shape_err!("{what} must be [N, K], got {s:?}")),
    }
}

/// Root of the mean square over `values`, scaled by the largest magnitude
/// first so tiny differences never underflow to zero.
fn root_mean_square(values: impl Iterator<Item = f64> + Clone, count: usize) -> f64 {
    let scale = values.clone().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || count == 0 {
        return 0.0;
    }
    let sum: f64 = values.map(|v| (v / scale).powi(2)).sum();
    scale * (sum / count as f64).sqrt()
}

/// Root mean squared error over every entry of two `[N, K]` matrices,
/// with a per-column breakdown.
pub fn rmse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<RegressionReport> {
    let (n, k) = matrix_dims(pred, "prediction")?;
    if pred.shape() != target.shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    let (p, t) = (pred.data(), target.data());
    let diff = |i: usize| p[i].as_f64() - t[i].as_f64();
    let per_question = (0..k).map(|j| root_mean_square((0..n).map(move |r| diff(r * k + j)), n)).collect();
    Ok(RegressionReport {
        rmse: root_mean_square((0..n * k).map(diff), n * k),
        per_question,
    })
}

/// Elementwise mean of equally shaped prediction matrices.
pub fn ensemble_average<T: Real>(members: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = members.first().ok_or_else(|| invalid!("ensemble needs at least one member"))?;
    matrix_dims(first, "ensemble member")?;
    if let Some(m) = members.iter().find(|m| m.shape() != first.shape()) {
        return Err(shape_err!("ensemble member {:?} differs from {:?}", m.shape(), first.shape()));
    }
    // Running mean, so identical members reproduce themselves exactly.
    let mut mean: Vec<f64> = first.data().iter().map(|v| v.as_f64()).collect();
    for (i, m) in members.iter().enumerate().skip(1) {
        let w = (i + 1) as f64;
        for (acc, v) in mean.iter_mut().zip(m.data()) {
            *acc += (v.as_f64() - *acc) / w;
        }
    }
    Tensor::new(first.shape().to_vec(), mean.into_iter().map(T::lit).collect())
}

impl fmt::Display for RegressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rmse {:.5}", self.rmse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![n, k], |_| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn identical_inputs_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random(&mut rng, 5, 37);
        let r = rmse(&p, &p).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.per_question, vec![0.0; 37]);
    }

    #[test]
    fn constant_error() {
        let t = Tensor::<f64>::full(vec![1, 37], 0.3).unwrap();
        let p = t.map(|v| v + 0.1);
        let r = rmse(&p, &t).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12);
        assert!(r.per_question.iter().all(|q| (q - 0.1).abs() < 1e-12));
    }

    #[test]
    fn agrees_with_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let (a, b) = (random(&mut rng, n, 37), random(&mut rng, n, 37));
            let mut rows = 0.0;
            for r in 0..n {
                let mut row = 0.0;
                for j in 0..37 {
                    row += (a.data()[r * 37 + j] - b.data()[r * 37 + j]).powi(2);
                }
                rows += row;
            }
            let expected = (rows / (n * 37) as f64).sqrt();
            assert!((rmse(&a, &b).unwrap().rmse - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_differences_are_not_zero() {
        let a = Tensor::<f64>::full(vec![1, 2], 0.0).unwrap();
        let b = Tensor::new(vec![1, 2], vec![1e-200, 0.0]).unwrap();
        assert!(rmse(&a, &b).unwrap().rmse > 0.0);
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, b, c) = (random(&mut rng, 3, 37), random(&mut rng, 3, 37), random(&mut rng, 3, 37));
            let d = |x: &Tensor<f64>, y: &Tensor<f64>| rmse(x, y).unwrap().rmse;
            assert!(d(&a, &b) > 0.0);
            assert_eq!(d(&a, &b), d(&b, &a));
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::<f64>::zeros(vec![2, 37]).unwrap();
        let b = Tensor::<f64>::zeros(vec![3, 37]).unwrap();
        assert!(rmse(&a, &b).is_err());
        assert!(rmse(&Tensor::<f64>::zeros(vec![37]).unwrap(), &Tensor::zeros(vec![37]).unwrap()).is_err());
        assert!(ensemble_average::<f64>(&[]).is_err());
        assert!(ensemble_average(&[a, b]).is_err());
    }

    #[test]
    fn ensemble_of_copies_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random(&mut rng, 4, 37);
        for k in 1..6 {
            let avg = ensemble_average(&vec![p.clone(); k]).unwrap();
            assert_eq!(avg.data(), p.data());
        }
        let q = p.cast::<f32>();
        assert_eq!(ensemble_average(&[q.clone(), q.clone(), q.clone()]).unwrap().data(), q.data());
    }

    #[test]
    fn ensemble_is_the_mean() {
        let a = Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.4, 0.8]).unwrap();
        let m = ensemble_average(&[a, b]).unwrap();
        assert!((m.data()[0] - 0.3f64).abs() < 1e-15);
        assert!((m.data()[1] - 0.6f64).abs() < 1e-15);
    }
}
