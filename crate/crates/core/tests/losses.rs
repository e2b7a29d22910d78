use lowshot::engine::{evaluate, ParamSet, Tensor};
use lowshot::losses::{
    gaussian_kernel, l2_loss, l2_loss_on_tape, mmd_loss, mmd_loss_on_tape, mmd_loss_with, psnr, KernelConfig,
    MmdEstimator,
};
use lowshot::ExecMode;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(s: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..s)
        .map(|_| Tensor::new([n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn stacked(set: &[Tensor<f64>]) -> Tensor<f64> {
    Tensor::stack(set).unwrap()
}

#[test]
fn l2_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_set(4, 30, &mut rng);
    let b = random_set(4, 30, &mut rng);
    let mut oracle = 0.0;
    for (x, y) in a.iter().zip(&b) {
        for k in 0..30 {
            oracle += (x.data()[k] - y.data()[k]).powi(2);
        }
    }
    oracle /= 4.0;
    assert!((l2_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn mmd_two_samples_matches_hand_enumeration() {
    let v = |x: &[f64]| Tensor::new([x.len()], x.to_vec()).unwrap();
    let g = [v(&[0.0, 1.0]), v(&[1.0, 1.0])];
    let x = [v(&[0.5, 0.0]), v(&[2.0, 1.0])];
    let alpha = 1.5;
    let k = |a: &[f64; 2], b: &[f64; 2]| (-((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / alpha).exp();
    let (g1, g2, x1, x2) = ([0.0, 1.0], [1.0, 1.0], [0.5, 0.0], [2.0, 1.0]);
    // C(2,2) = 1; ordered pairs: (1,2),(2,1) within each set, cross i≠j.
    let expected = 2.0 * k(&g1, &g2) + 2.0 * k(&x1, &x2) - 2.0 * (k(&g1, &x2) + k(&g2, &x1));
    let cfg = KernelConfig::new(alpha).unwrap();
    assert!((mmd_loss(&g, &x, cfg).unwrap() - expected).abs() < 1e-14);
}

#[test]
fn tape_losses_equal_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for estimator in [MmdEstimator::Literal, MmdEstimator::Unbiased] {
        let g = random_set(5, 12, &mut rng);
        let x = random_set(5, 12, &mut rng);
        let cfg = KernelConfig::median_heuristic(&x).unwrap();
        let mut params = ParamSet::new();
        params.push("g", stacked(&g), true).unwrap();
        let shots = stacked(&x);
        let on_tape = evaluate(&params, ExecMode::Sequential, |t, v| mmd_loss_on_tape(t, v[0], &shots, cfg, estimator)).unwrap();
        let direct = mmd_loss_with(&g, &x, cfg, estimator).unwrap();
        assert!((on_tape - direct).abs() < 1e-12, "{estimator:?}: {on_tape} vs {direct}");
        let l2 = evaluate(&params, ExecMode::Sequential, |t, v| l2_loss_on_tape(t, v[0], &shots)).unwrap();
        assert!((l2 - l2_loss(&g, &x).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn unbiased_estimator_uses_full_cross_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_set(3, 4, &mut rng);
    let x = random_set(3, 4, &mut rng);
    let cfg = KernelConfig::new(2.0).unwrap();
    let k = |a: &Tensor<f64>, b: &Tensor<f64>| gaussian_kernel(a, b, cfg).unwrap();
    let (mut within, mut cross) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                within += k(&g[i], &g[j]) + k(&x[i], &x[j]);
            }
            cross += k(&g[i], &x[j]);
        }
    }
    let expected = within / 6.0 - 2.0 * cross / 9.0;
    assert!((mmd_loss_with(&g, &x, cfg, MmdEstimator::Unbiased).unwrap() - expected).abs() < 1e-14);
}

#[test]
fn psnr_matches_two_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_set(1, 300, &mut rng).remove(0);
    let b = random_set(1, 300, &mut rng).remove(0);
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x + 1.0) / 2.0 - (y + 1.0) / 2.0).powi(2)).sum::<f64>() / 300.0;
    let oracle = 10.0 * (1.0 / mse).log10();
    assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-10);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_is_symmetric_and_bounded(seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(2, 8, &mut rng);
        let cfg = KernelConfig::new(alpha).unwrap();
        let k12 = gaussian_kernel(&s[0], &s[1], cfg).unwrap();
        prop_assert_eq!(k12, gaussian_kernel(&s[1], &s[0], cfg).unwrap());
        prop_assert!(k12 > 0.0 && k12 <= 1.0);
        prop_assert_eq!(gaussian_kernel(&s[0], &s[0], cfg).unwrap(), 1.0);
    }

    #[test]
    fn l2_is_nonnegative_and_zero_only_on_equality(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_set(3, 6, &mut rng);
        let mut b = a.clone();
        prop_assert_eq!(l2_loss(&a, &b).unwrap(), 0.0);
        b[1].data_mut()[2] += 1e-3;
        prop_assert!(l2_loss(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn mmd_matched_sets_cancel(seed in any::<u64>(), s in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_set(s, 10, &mut rng);
        let cfg = KernelConfig::median_heuristic(&x).unwrap();
        prop_assert!(mmd_loss(&x, &x, cfg).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn mmd_permutation_invariances(seed in any::<u64>(), s in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_set(s, 5, &mut rng);
        let x = random_set(s, 5, &mut rng);
        let cfg = KernelConfig::new(3.0).unwrap();
        let mut perm: Vec<usize> = (0..s).collect();
        perm.shuffle(&mut rng);
        let pg: Vec<_> = perm.iter().map(|&i| g[i].clone()).collect();
        let px: Vec<_> = perm.iter().map(|&i| x[i].clone()).collect();
        // The literal cross sum skips index-equal pairs: only a shared
        // permutation preserves it.
        let lit = mmd_loss(&g, &x, cfg).unwrap();
        prop_assert!((mmd_loss(&pg, &px, cfg).unwrap() - lit).abs() < 1e-12);
        // With the full cross sum, either list may be permuted on its own.
        let unb = mmd_loss_with(&g, &x, cfg, MmdEstimator::Unbiased).unwrap();
        prop_assert!((mmd_loss_with(&pg, &x, cfg, MmdEstimator::Unbiased).unwrap() - unb).abs() < 1e-12);
        prop_assert!((mmd_loss_with(&g, &px, cfg, MmdEstimator::Unbiased).unwrap() - unb).abs() < 1e-12);
    }

    #[test]
    fn mmd_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_set(4, 7, &mut rng);
        let x = random_set(4, 7, &mut rng);
        let cfg = KernelConfig::new(1.7).unwrap();
        prop_assert!((mmd_loss(&g, &x, cfg).unwrap() - mmd_loss(&x, &g, cfg).unwrap()).abs() <= 1e-12);
    }
}
