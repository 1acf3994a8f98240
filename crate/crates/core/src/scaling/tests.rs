use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

#[test]
fn constraint_examples() {
    let c = |alpha, beta, gamma| ScalingCoefficients { alpha, beta, gamma, phi: 1.0 };
    assert_eq!(check_constraint(&c(1.0, 1.0, 1.0)).unwrap(), -1.0);
    assert_eq!(check_constraint(&c(2.0, 1.0, 1.0)).unwrap(), 0.0);
    let d = check_constraint(&ScalingCoefficients::default()).unwrap();
    assert!((d - (1.2 * 1.1 * 1.1 * 1.15 * 1.15 - 2.0)).abs() < 1e-15);
    assert!((d + 0.0797).abs() < 1e-4);
    assert!(check_constraint(&c(0.9, 1.0, 1.0)).is_err());
    assert!(check_constraint(&c(1.0, 1.0, f64::NAN)).is_err());
}

#[test]
fn unit_rounding() {
    assert_eq!(round_to_unit(17.6, 8), 16);
    assert_eq!(round_to_unit(20.0, 8), 24);
    assert_eq!(round_to_unit(3.0, 8), 8);
    assert_eq!(round_to_unit(35.2, 8), 32);
}

#[test]
fn phi_zero_is_identity() {
    for base in [ScaledArch::efficientnet_b0(), ScaledArch::toy()] {
        assert_eq!(scale_arch(&base, &ScalingCoefficients::default()).unwrap(), base);
    }
}

#[test]
fn pure_depth_doubling() {
    let c = ScalingCoefficients { alpha: 2.0, beta: 1.0, gamma: 1.0, phi: 1.0 };
    let base = ScaledArch::efficientnet_b0();
    let s = scale_arch(&base, &c).unwrap();
    for (a, b) in base.stages.iter().zip(&s.stages) {
        assert_eq!(b.layers, 2 * a.layers);
        assert_eq!(b.channels, a.channels);
    }
    assert_eq!(s.stem, base.stem);
    assert_eq!(s.resolution, 224);
}

#[test]
fn toy_phi_one_by_hand() {
    let s = scale_arch(&ScaledArch::toy(), &ScalingCoefficients::with_phi(1.0)).unwrap();
    // 16·1.1 = 17.6 -> 16, 24·1.1 = 26.4 -> 24, 32·1.1 = 35.2 -> 32,
    // ceil(1.2) = 2 blocks, round(32·1.15) = 37 pixels.
    assert_eq!(s.stem.channels, 16);
    let got: Vec<(usize, usize)> = s.stages.iter().map(|st| (st.channels, st.layers)).collect();
    assert_eq!(got, vec![(16, 2), (24, 2), (32, 2)]);
    assert_eq!(s.resolution, 37);
}

#[test]
fn monotone_in_phi() {
    let base = ScaledArch::efficientnet_b0();
    let mut prev = base.clone();
    for i in 1..=16 {
        let s = scale_arch(&base, &ScalingCoefficients::with_phi(i as f64 * 0.5)).unwrap();
        assert!(s.resolution >= prev.resolution);
        for (a, b) in prev.groups().iter().zip(s.groups().iter()) {
            assert!(b.1.layers >= a.1.layers && b.1.channels >= a.1.channels);
        }
        prev = s;
    }
}

#[test]
fn infeasible_resolution() {
    let mut base = ScaledArch::toy();
    base.resolution = 4;
    assert!(base.validate().is_err());
    assert!(scale_arch(&base, &ScalingCoefficients::with_phi(1.0)).is_err());
}

#[test]
fn flops_laws() {
    assert_eq!(conv_flops(1, 1, 1, 1, 1, 1), 2);
    assert_eq!(conv_flops(20, 20, 3, 1, 4, 8), 4 * conv_flops(10, 10, 3, 1, 4, 8));
    let base = ScaledArch::efficientnet_b0();
    let mut big = base.clone();
    big.resolution *= 2;
    let r = estimate_flops(&big) as f64 / estimate_flops(&base) as f64;
    // Only SE and head layers do not grow with area.
    assert!(r > 3.99 && r <= 4.0, "{r}");
}

#[test]
fn b0_flops_magnitude() {
    // A B0-sized network costs on the order of 0.4 G multiply-adds.
    let f = estimate_flops(&ScaledArch::efficientnet_b0());
    assert!((6e8..1.0e9).contains(&(f as f64)), "{f}");
}

#[test]
fn arch_text_round_trip() {
    for name in PRESET_NAMES {
        let a = preset(name).unwrap();
        assert_eq!(ScaledArch::from_toml(&a.to_toml()).unwrap(), a);
    }
    assert!(ScaledArch::from_toml("format = 2").is_err());
}

#[test]
fn presets() {
    assert!(preset("b8").is_err());
    assert!(preset("resnet").is_err());
    assert_eq!(preset("b3").unwrap().resolution, 224);
    assert_eq!(preset("b4").unwrap().resolution, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let counts: Vec<usize> = ["b0", "b1", "b2"]
        .iter()
        .map(|n| build_network::<f32, _>(&preset(n).unwrap(), &mut rng).unwrap().num_params())
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn b0_forward_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = build_network::<f32, _>(&preset("b0").unwrap(), &mut rng).unwrap();
    let x = Tensor::full(vec![1, 224, 224, 3], 0.5f32).unwrap();
    let y = net.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 7]);
    assert!((y.sum() - 1.0).abs() < 1e-5);
}

#[test]
fn toy_accepts_any_feasible_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = build_network::<f32, _>(&ScaledArch::toy(), &mut rng).unwrap();
    for side in [8, 13, 32] {
        let y = net.predict(&Tensor::full(vec![2, side, side, 3], 0.3f32).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 7]);
    }
    assert_eq!(net.layer_names(), vec!["stem", "stage1", "stage2", "stage3"]);
    let acts = net.activations(&Tensor::full(vec![1, 32, 32, 3], 0.3f32).unwrap(), &["stage2".into()]).unwrap();
    assert_eq!(acts[0].1.shape(), &[1, 8, 8, 24]);
    assert!(net.activations(&Tensor::full(vec![1, 8, 8, 3], 0.3f32).unwrap(), &["nope".into()]).is_err());
}

#[test]
fn toy_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = build_network::<f32, _>(&ScaledArch::toy(), &mut rng).unwrap();
    let r = check_network_gradients::<f64>(&net, 2, 8, 6, 1e-6, 7).unwrap();
    assert!(r.skipped * 50 <= r.checked + r.skipped, "{r:?}");
    assert!(r.max_relative_error < 1e-6, "{r:?}");
    assert!(r.checked > 384);
}
