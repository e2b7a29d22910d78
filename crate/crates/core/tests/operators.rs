use lowshot::engine::Tensor;
use lowshot::operators::{add_noise, gaussian_operator, identity_operator, luma_operator, MeasurementOperator};
use lowshot::ExecMode;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference 8-bit luma: integer weights, truncating division.
fn luma_8bit(r: u32, g: u32, b: u32) -> u32 {
    (r * 299 + g * 587 + b * 114) / 1000
}

fn pixel_image(rgb: [u8; 3]) -> Tensor<f64> {
    Tensor::new([3, 1, 1], rgb.iter().map(|&v| v as f64 / 127.5 - 1.0).collect()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn luma_matches_8bit_reference_within_one_level() {
    let op = luma_operator(1, 1);
    let mut cases = vec![[255, 0, 0], [0, 255, 0], [0, 0, 255], [0, 0, 0], [255, 255, 255]];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    cases.extend((0..100).map(|_| [rng.random(), rng.random(), rng.random()]));
    for rgb in cases {
        let y = op.apply(&pixel_image(rgb), ExecMode::Sequential).unwrap().data()[0];
        let level = (y + 1.0) * 127.5;
        let reference = luma_8bit(rgb[0] as u32, rgb[1] as u32, rgb[2] as u32) as f64;
        assert!((level - reference).abs() <= 1.0, "{rgb:?}: {level} vs {reference}");
    }
    let red = op.apply(&pixel_image([255, 0, 0]), ExecMode::Sequential).unwrap().data()[0];
    assert_eq!(((red + 1.0) * 127.5) as u32, 76);
    assert_eq!(luma_8bit(255, 0, 0), 76);
    let white = op.apply(&pixel_image([255, 255, 255]), ExecMode::Sequential).unwrap().data()[0];
    assert!((white - 1.0).abs() < 1e-12);
}

#[test]
fn luma_fixes_gray_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let plane: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new([3, 4, 5], [plane.clone(), plane.clone(), plane.clone()].concat()).unwrap();
    let y = luma_operator(4, 5).apply(&x, ExecMode::Sequential).unwrap();
    assert_eq!(y.shape(), &[4, 5]);
    for (a, b) in y.data().iter().zip(&plane) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gaussian_entries_are_standard_normal() {
    let op = gaussian_operator(1000, 1000, 5).unwrap();
    let MeasurementOperator::Gaussian(g) = &op else { unreachable!() };
    let e = g.entries();
    assert_eq!(e.len(), 1_000_000);
    let n = e.len() as f64;
    let mean = e.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = e.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 0.005, "mean {mean}");
    assert!((var - 1.0).abs() <= 0.01, "variance {var}");
    let again = gaussian_operator(1000, 1000, 5).unwrap();
    assert_eq!(op, again);
    assert_ne!(op, gaussian_operator(1000, 1000, 6).unwrap());
}

#[test]
fn gaussian_apply_matches_dense_oracle_and_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let op = gaussian_operator(17, 48, 3).unwrap();
    let MeasurementOperator::Gaussian(g) = &op else { unreachable!() };
    let x = random(&[3, 4, 4], &mut rng);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let y = op.apply(&x, mode).unwrap();
        for i in 0..17 {
            let row: f64 = (0..48).map(|j| g.entries()[i * 48 + j] as f64 * x.data()[j]).sum();
            assert!((y.data()[i] - row).abs() < 1e-12);
        }
    }
    let v = random(&[17], &mut rng);
    let lhs = op.apply(&x, ExecMode::Sequential).unwrap().dot(&v);
    let rhs = x.dot(&op.adjoint(&v, ExecMode::Sequential).unwrap().reshape(vec![3, 4, 4]).unwrap());
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn noise_has_requested_spread_and_zero_is_exact() {
    let y = Tensor::<f64>::zeros(vec![100_000]);
    let m = add_noise(&y, 0.1, 9).unwrap();
    let n = 100_000.0;
    let mean = m.values.data().iter().sum::<f64>() / n;
    let std = (m.values.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.1).abs() <= 0.002, "std {std}");
    assert_eq!(add_noise(&y, 0.1, 9).unwrap(), m);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let base = random(&[50], &mut rng);
    assert_eq!(add_noise(&base, 0.0, 1).unwrap().values, base);
}

#[test]
fn identity_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[3, 4, 4], &mut rng);
    assert_eq!(identity_operator(&[3, 4, 4]).apply(&x, ExecMode::Sequential).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_operator_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = [
            gaussian_operator(20, 75, seed).unwrap(),
            luma_operator(5, 5),
            identity_operator(&[3, 5, 5]),
        ];
        let x = random(&[3, 5, 5], &mut rng);
        let y = random(&[3, 5, 5], &mut rng);
        let combo = Tensor::new([3, 5, 5], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        for op in &ops {
            let lhs = op.apply(&combo, ExecMode::Sequential).unwrap();
            let ax = op.apply(&x, ExecMode::Sequential).unwrap();
            let ay = op.apply(&y, ExecMode::Sequential).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * ax.data()[i] + b * ay.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-9, "{}: {} vs {}", op.kind(), lhs.data()[i], rhs);
            }
        }
    }
}
