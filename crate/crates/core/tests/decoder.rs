use lowshot::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lowshot::decoder::{init_params, Descriptor, LatentCode};
use lowshot::{Error, ExecMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn canonical_parameter_count_matches_layer_table() {
    // z(128) → 512 @4×4 → 256 @8×8 → 128 @16×16 → 64 @32×32 → 3 @64×64,
    // 4×4 kernels without bias, BN (γ, β) after every hidden layer.
    let convs = 128 * 512 * 16 + 512 * 256 * 16 + 256 * 128 * 16 + 128 * 64 * 16 + 64 * 3 * 16;
    let norms = 2 * (512 + 256 + 128 + 64);
    assert_eq!(convs + norms, 3_806_080);
    let d = Descriptor::default();
    assert_eq!(d.parameter_count(), convs + norms);
    let p = init_params::<f32>(0, d).unwrap();
    assert_eq!(p.params.count(), convs + norms);
}

#[test]
fn default_output_has_image_shape_and_tanh_range() {
    let d = Descriptor::default();
    let p = init_params::<f32>(1, d).unwrap();
    let z = LatentCode::standard_normal(128, &mut ChaCha8Rng::seed_from_u64(2));
    let x = p.generate(&z, ExecMode::default()).unwrap();
    assert_eq!(x.shape(), &[3, 64, 64]);
    assert!(x.data().iter().all(|v| *v > -1.0 && *v < 1.0));
    assert_eq!(x, p.generate(&z, ExecMode::default()).unwrap());
}

#[test]
fn batched_forward_equals_looped_forwards() {
    let d = Descriptor::desk();
    let p = init_params::<f64>(3, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zs: Vec<LatentCode<f64>> = (0..5).map(|_| LatentCode::standard_normal(d.latent_dim, &mut rng)).collect();
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let batch = p.generate_batch(&zs, mode).unwrap();
        for (i, z) in zs.iter().enumerate() {
            assert_eq!(batch.index_axis0(i).unwrap(), p.generate(z, mode).unwrap());
        }
    }
}

#[test]
fn sequential_and_parallel_forwards_are_bit_identical() {
    let d = Descriptor::desk();
    let p = init_params::<f32>(5, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zs: Vec<LatentCode<f32>> = (0..7).map(|_| LatentCode::standard_normal(d.latent_dim, &mut rng)).collect();
    assert_eq!(
        p.generate_batch(&zs, ExecMode::Sequential).unwrap(),
        p.generate_batch(&zs, ExecMode::Parallel).unwrap()
    );
}

#[test]
fn tiny_latent_perturbation_moves_output_little() {
    let d = Descriptor::default();
    let p = init_params::<f64>(7, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = LatentCode::standard_normal(d.latent_dim, &mut rng);
    let dir = LatentCode::<f64>::standard_normal(d.latent_dim, &mut rng);
    let norm = dir.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z2 = LatentCode::new(z.values.iter().zip(&dir.values).map(|(a, b)| a + 1e-6 * b / norm).collect());
    let a = p.generate(&z, ExecMode::default()).unwrap();
    let b = p.generate(&z2, ExecMode::default()).unwrap();
    let linf = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(linf <= 1e-2, "ℓ∞ change {linf}");
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let d = Descriptor::desk();
    let p = init_params::<f32>(9, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let latents: Vec<LatentCode<f32>> = (0..3).map(|_| LatentCode::standard_normal(d.latent_dim, &mut rng)).collect();
    save_checkpoint(&p, &latents, &path).unwrap();
    let (p2, l2) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(p2, p);
    assert_eq!(l2, latents);
    for (a, b) in p.params.leaves().iter().zip(p2.params.leaves()) {
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()));
    }
}

#[test]
fn wrong_descriptor_and_truncation_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let d = Descriptor::desk();
    save_checkpoint(&init_params::<f32>(1, d).unwrap(), &[], &path).unwrap();
    let other = Descriptor { latent_dim: 32, ..d };
    assert!(matches!(Checkpoint::<f32>::load_expecting(&path, &other), Err(Error::Incompatible(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Parse(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn outputs_stay_inside_open_unit_interval(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let d = Descriptor::desk();
        let p = init_params::<f64>(seed, d).unwrap();
        let z = LatentCode::<f64>::standard_normal(d.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let z = LatentCode::new(z.values.iter().map(|v| v * scale).collect());
        let x = p.generate(&z, ExecMode::Sequential).unwrap();
        prop_assert!(x.data().iter().all(|v| *v > -1.0 && *v < 1.0));
    }
}
