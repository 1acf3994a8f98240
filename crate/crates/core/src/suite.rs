//! Finite-difference gradient suite: every differentiable tape op, the
//! network blocks, and the toy network end to end, all in `f64`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{se_excite, MbConv, MbConvConfig, ResidualBlock, ResidualConfig, SeConfig, SeVariant};
use crate::scaling::{build_network, check_network_gradients, ScaledArch};
use crate::tensor::{grad_check, Activation, GradCheckReport, Padding, ParamStore, Tape, Var};

/// Central-difference step for the `f64` suite.
pub const SUITE_EPS: f64 = 3e-5;
/// Largest relative error the suite accepts.
pub const SUITE_TOLERANCE: f64 = 1e-6;

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A named check: given a per-seed RNG, the input shapes and the function.
struct Case {
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Result<(Vec<Vec<usize>>, Builder)>,
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn image_shape(rng: &mut ChaCha8Rng, min_side: usize) -> Vec<usize> {
    vec![dim(rng, 1, 2), dim(rng, min_side, 6), dim(rng, min_side, 6), dim(rng, 1, 4)]
}

fn any_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..dim(rng, 1, 3)).map(|_| dim(rng, 1, 5)).collect()
}

fn unary(f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Builder {
    Box::new(move |t, v| f(t, v[0]))
}

fn binary(f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Builder {
    Box::new(move |t, v| f(t, v[0], v[1]))
}

fn dense_case(rng: &mut ChaCha8Rng, act: Activation) -> Result<(Vec<Vec<usize>>, Builder)> {
    let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 6));
    Ok((vec![vec![n, i], vec![i, o], vec![o]], Box::new(move |t, v| t.dense(v[0], v[1], v[2], act))))
}

fn conv_case(rng: &mut ChaCha8Rng, stride: usize, padding: Padding) -> Result<(Vec<Vec<usize>>, Builder)> {
    let k = [1, 3][dim(rng, 0, 1)];
    let x = image_shape(rng, 3);
    let co = dim(rng, 1, 4);
    let shapes = vec![x.clone(), vec![k, k, x[3], co], vec![co]];
    Ok((shapes, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding))))
}

fn depthwise_case(rng: &mut ChaCha8Rng, stride: usize) -> Result<(Vec<Vec<usize>>, Builder)> {
    let x = image_shape(rng, 1);
    let shapes = vec![x.clone(), vec![3, 3, x[3]], vec![x[3]]];
    Ok((shapes, Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, Padding::Same))))
}

fn se_case(rng: &mut ChaCha8Rng, variant: SeVariant) -> Result<(Vec<Vec<usize>>, Builder)> {
    let (n, d) = (dim(rng, 1, 3), dim(rng, 2, 8));
    let cfg = SeConfig {
        bottleneck: dim(rng, 1, d),
        variant,
        ..SeConfig::new(d)
    };
    let m = cfg.bottleneck;
    let shapes = vec![vec![n, d], vec![d, m], vec![m], vec![m, d], vec![d]];
    Ok((shapes, Box::new(move |t, v| se_excite(t, v[0], &cfg, (v[1], v[2]), (v[3], v[4])))))
}

/// Squeeze, excitation and rescale on an image leaf, weights as leaves.
fn se_block_case(rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<usize>>, Builder)> {
    let x = image_shape(rng, 1);
    let (d, m) = (x[3], dim(rng, 1, x[3]));
    let cfg = SeConfig {
        bottleneck: m,
        ..SeConfig::new(d)
    };
    let shapes = vec![x, vec![d, m], vec![m], vec![m, d], vec![d]];
    Ok((
        shapes,
        Box::new(move |t, v| {
            let z = t.global_avg_pool(v[0])?;
            let s = se_excite(t, z, &cfg, (v[1], v[2]), (v[3], v[4]))?;
            t.channel_scale(v[0], s)
        }),
    ))
}

fn mbconv_case(rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<usize>>, Builder)> {
    let x = image_shape(rng, 2);
    let skip = rng.random_bool(0.5);
    let cfg = MbConvConfig {
        in_channels: x[3],
        out_channels: if skip { x[3] } else { dim(rng, 1, 4) },
        expansion_ratio: dim(rng, 1, 4),
        kernel_size: 3,
        stride: if skip { 1 } else { dim(rng, 1, 2) },
        se_fraction: 0.25,
        se_variant: SeVariant::FcSigmoid,
    };
    let mut store = ParamStore::new();
    let block = MbConv::new(&mut store, "mb", cfg, rng)?;
    Ok((
        vec![x],
        Box::new(move |t, v| block.forward(t, &store, v[0])),
    ))
}

fn residual_case(rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<usize>>, Builder)> {
    let x = image_shape(rng, 2);
    let cfg = ResidualConfig {
        channels: x[3],
        kernel_size: 3,
    };
    let mut store = ParamStore::new();
    let block = ResidualBlock::new(&mut store, "res", cfg, rng)?;
    Ok((vec![x], Box::new(move |t, v| block.forward(t, &store, v[0]))))
}

fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:literal, |$rng:ident| $body:expr) => {
            Case {
                name: $name,
                make: |$rng| $body,
            }
        };
    }
    vec![
        case!("add", |r| {
            let s = any_shape(r);
            Ok((vec![s.clone(), s], binary(|t, a, b| t.add(a, b))))
        }),
        case!("sub", |r| {
            let s = any_shape(r);
            Ok((vec![s.clone(), s], binary(|t, a, b| t.sub(a, b))))
        }),
        case!("mul", |r| {
            let s = any_shape(r);
            Ok((vec![s.clone(), s], binary(|t, a, b| t.mul(a, b))))
        }),
        case!("scale", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.scale(a, -1.7)))))),
        case!("add_scalar", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.add_scalar(a, 0.3)))))),
        case!("sum", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.sum(a)))))),
        case!("mean", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.mean(a)))))),
        case!("square", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.square(a)))))),
        case!("sqrt", |r| Ok((
            vec![any_shape(r)],
            unary(|t, a| {
                let sq = t.square(a);
                let pos = t.add_scalar(sq, 0.5);
                t.sqrt(pos)
            })
        ))),
        case!("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            Ok((vec![vec![a, b, 2]], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.reshape(v[0], vec![2 * b, a])) as Builder))
        }),
        case!("matmul", |r| {
            let (n, k, m) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            Ok((vec![vec![n, k], vec![k, m]], binary(|t, a, b| t.matmul(a, b))))
        }),
        case!("add_bias", |r| {
            let s = image_shape(r, 1);
            let c = s[3];
            Ok((vec![s, vec![c]], binary(|t, a, b| t.add_bias(a, b))))
        }),
        case!("dense_identity", |r| dense_case(r, Activation::Identity)),
        case!("dense_relu", |r| dense_case(r, Activation::Relu)),
        case!("dense_sigmoid", |r| dense_case(r, Activation::Sigmoid)),
        case!("dense_softmax", |r| dense_case(r, Activation::Softmax)),
        case!("conv2d_same_s1", |r| conv_case(r, 1, Padding::Same)),
        case!("conv2d_same_s2", |r| conv_case(r, 2, Padding::Same)),
        case!("conv2d_valid_s1", |r| conv_case(r, 1, Padding::Valid)),
        case!("depthwise_s1", |r| depthwise_case(r, 1)),
        case!("depthwise_s2", |r| depthwise_case(r, 2)),
        case!("pointwise_conv", |r| {
            let x = image_shape(r, 1);
            let co = dim(r, 1, 4);
            let shapes = vec![x.clone(), vec![1, 1, x[3], co], vec![co]];
            Ok((shapes, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.pointwise_conv(v[0], v[1], Some(v[2]))) as Builder))
        }),
        case!("global_avg_pool", |r| Ok((vec![image_shape(r, 1)], unary(|t, a| t.global_avg_pool(a))))),
        case!("max_pool", |r| Ok((vec![image_shape(r, 2)], unary(|t, a| t.max_pool(a, 2, 2))))),
        case!("relu", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.relu(a)))))),
        case!("sigmoid", |r| Ok((vec![any_shape(r)], unary(|t, a| Ok(t.sigmoid(a)))))),
        case!("softmax", |r| Ok((vec![vec![dim(r, 1, 4), dim(r, 2, 7)]], unary(|t, a| Ok(t.softmax(a)))))),
        case!("dropout", |r| Ok((
            vec![any_shape(r)],
            unary(|t, a| t.dropout(a, 0.3, true, &mut ChaCha8Rng::seed_from_u64(5)))
        ))),
        case!("cross_entropy", |r| {
            let s = vec![dim(r, 1, 4), dim(r, 2, 7)];
            Ok((
                vec![s.clone(), s],
                binary(|t, a, b| {
                    let (p, y) = (t.softmax(a), t.softmax(b));
                    t.cross_entropy(p, y)
                }),
            ))
        }),
        case!("channel_scale", |r| {
            let s = image_shape(r, 1);
            let sc = vec![s[0], s[3]];
            Ok((vec![s, sc], binary(|t, a, b| t.channel_scale(a, b))))
        }),
        case!("se_excite_fc", |r| se_case(r, SeVariant::FcSigmoid)),
        case!("se_excite_pointwise", |r| se_case(r, SeVariant::Pointwise)),
        case!("se_block", |r| se_block_case(r)),
        case!("mbconv", |r| mbconv_case(r)),
        case!("residual", |r| residual_case(r)),
    ]
}

/// Worst result of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seeds: u64,
    pub tolerance: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.checked > 0 && e.max_relative_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>12} {:>9} {:>8}", "check", "max rel err", "checked", "skipped")?;
        for e in &self.entries {
            let mark = if e.checked > 0 && e.max_relative_error < self.tolerance { "" } else { "  FAIL" };
            writeln!(f, "{:<22} {:>12.3e} {:>9} {:>8}{mark}", e.name, e.max_relative_error, e.checked, e.skipped)?;
        }
        write!(f, "{} seeds, tolerance {:e}, worst {:.3e}", self.seeds, self.tolerance, self.worst())
    }
}

fn merge(entry: &mut SuiteEntry, r: &GradCheckReport) {
    entry.max_relative_error = entry.max_relative_error.max(r.max_relative_error);
    entry.checked += r.checked;
    entry.skipped += r.skipped;
}

/// Runs every check for seeds `0..seeds` with central step `eps`.
pub fn gradient_suite(seeds: u64, eps: f64, tolerance: f64) -> Result<SuiteReport> {
    let cases = cases();
    let mut entries: Vec<SuiteEntry> = cases
        .iter()
        .map(|c| c.name)
        .chain(["toy_network"])
        .map(|name| SuiteEntry {
            name: name.to_string(),
            max_relative_error: 0.0,
            checked: 0,
            skipped: 0,
        })
        .collect();
    for seed in 0..seeds {
        for (i, (case, entry)) in cases.iter().zip(entries.iter_mut()).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (shapes, build) = (case.make)(&mut rng)?;
            merge(entry, &grad_check::<f64, _>(build, &shapes, eps, seed)?);
        }
        let net = build_network::<f32, _>(&ScaledArch::toy(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let r = check_network_gradients::<f64>(&net, 2, 8, 4, eps, seed)?;
        merge(entries.last_mut().expect("network entry"), &r);
    }
    Ok(SuiteReport {
        seeds,
        tolerance,
        entries,
    })
}
