use densegrad::augment::{
    apply_transform, augment_batch, sample_stream, sample_transform, AugmentationPolicy, FillMode,
    SampledTransform,
};
use densegrad::data::Batch;
use densegrad::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([c, h, w], |_| rng.random::<f32>())
}

fn random_batch(seed: u64, n: usize, h: usize, w: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        images: Tensor::from_fn([n, 3, h, w], |_| rng.random::<f32>()),
        labels: (0..n).map(|i| i % 18).collect(),
        indices: (0..n).map(|i| 100 + 7 * i).collect(),
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn drawn_parameters_respect_policy_bounds() {
    let policy = AugmentationPolicy::default();
    let (h, w) = (40, 60);
    let draws = 10_000;
    let mut angle_sum = 0.0;
    let mut hflips = 0;
    let mut vflips = 0;
    for i in 0..draws {
        let mut rng = sample_stream(3, 0, i);
        let t = sample_transform(&policy, &mut rng, h, w);
        assert!(t.angle_deg.abs() <= 30.0);
        assert!(t.shear_deg.abs() <= 15.0);
        assert!(t.shift.0.abs() <= 0.1 * w as f64);
        assert!(t.shift.1.abs() <= 0.1 * h as f64);
        angle_sum += t.angle_deg;
        hflips += t.hflip as usize;
        vflips += t.vflip as usize;
    }
    // Uniform on ±30°: the standard error of the mean is 30/√(3·10⁴) ≈ 0.17°.
    let mean = angle_sum / draws as f64;
    assert!(mean.abs() < 1.0, "mean angle {mean}");
    for count in [hflips, vflips] {
        let frac = count as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.02, "flip fraction {frac}");
    }
}

#[test]
fn quarter_turn_matches_scatter_oracle() {
    let n = 5;
    let input = Tensor::from_fn([1, n, n], |i| (i * i % 17) as f32 + 0.25 * i as f32);
    let t = SampledTransform::from_parts(90.0, 0.0, (0.0, 0.0), false, false, n, n);
    let out = apply_transform(&input, &t, &AugmentationPolicy::none()).unwrap();

    // Forward map each input pixel centre and write it to its destination.
    let c = (n as f64 - 1.0) / 2.0;
    let mut expected = vec![f32::NAN; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let (fx, fy) = (c - dy, c + dx);
            expected[fy.round() as usize * n + fx.round() as usize] = input.data()[y * n + x];
        }
    }
    for (i, (&got, &want)) in out.data().iter().zip(&expected).enumerate() {
        assert!((got - want).abs() < 1e-6, "pixel {i}: {got} vs {want}");
    }
    // Direct statement of the same permutation.
    for yo in 0..n {
        for xo in 0..n {
            let want = input.data()[(n - 1 - xo) * n + yo];
            assert!((out.data()[yo * n + xo] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn integer_shift_translates_exactly() {
    let (h, w) = (6, 7);
    let input = random_image(2, 2, h, w);
    let t = SampledTransform::from_parts(0.0, 0.0, (2.0, 1.0), false, false, h, w);
    let policy = AugmentationPolicy {
        fill_mode: FillMode::Constant(-1.0),
        ..AugmentationPolicy::none()
    };
    let out = apply_transform(&input, &t, &policy).unwrap();
    for ch in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let got = out.data()[(ch * h + y) * w + x];
                let want = if x >= 2 && y >= 1 {
                    input.data()[(ch * h + y - 1) * w + x - 2]
                } else {
                    -1.0
                };
                assert!((got - want).abs() < 1e-6, "({ch},{y},{x})");
            }
        }
    }
}

#[test]
fn nearest_fill_replicates_edges() {
    let (h, w) = (4, 5);
    let input = random_image(9, 1, h, w);
    let t = SampledTransform::from_parts(0.0, 0.0, (-3.0, 0.0), false, false, h, w);
    let out = apply_transform(&input, &t, &AugmentationPolicy::none()).unwrap();
    for y in 0..h {
        for x in 2..w {
            assert_eq!(out.data()[y * w + x], input.data()[y * w + w - 1]);
        }
    }
}

#[test]
fn flips_reverse_indices() {
    let (h, w) = (3, 4);
    let input = random_image(5, 3, h, w);
    let policy = AugmentationPolicy::none();
    let hflip = SampledTransform {
        hflip: true,
        ..SampledTransform::identity()
    };
    let vflip = SampledTransform {
        vflip: true,
        ..SampledTransform::identity()
    };
    let ho = apply_transform(&input, &hflip, &policy).unwrap();
    let vo = apply_transform(&input, &vflip, &policy).unwrap();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let at = |t: &Tensor<f32>, y: usize, x: usize| t.data()[(ch * h + y) * w + x];
                assert_eq!(at(&ho, y, x), at(&input, y, w - 1 - x));
                assert_eq!(at(&vo, y, x), at(&input, h - 1 - y, x));
            }
        }
    }
}

#[test]
fn same_key_gives_identical_batches() {
    let batch = random_batch(1, 6, 12, 12);
    let policy = AugmentationPolicy::default();
    let a = augment_batch(&batch, &policy, 42, 3).unwrap();
    let b = augment_batch(&batch, &policy, 42, 3).unwrap();
    assert_eq!(bits(&a.images), bits(&b.images));
    assert_eq!(a.labels, batch.labels);
    assert_eq!(a.indices, batch.indices);
}

#[test]
fn output_is_independent_of_batch_composition() {
    let batch = random_batch(4, 5, 10, 10);
    let policy = AugmentationPolicy::default();
    let full = augment_batch(&batch, &policy, 8, 1).unwrap();
    let per_sample = 3 * 10 * 10;
    for i in 0..5 {
        let single = Batch {
            images: batch.images.sample(i).unwrap(),
            labels: vec![batch.labels[i]],
            indices: vec![batch.indices[i]],
        };
        let out = augment_batch(&single, &policy, 8, 1).unwrap();
        assert_eq!(
            bits(&out.images),
            bits(&full.images)[i * per_sample..(i + 1) * per_sample]
        );
    }
}

#[test]
fn epochs_draw_different_transforms() {
    let batch = random_batch(2, 4, 16, 16);
    let policy = AugmentationPolicy::default();
    let a = augment_batch(&batch, &policy, 7, 0).unwrap();
    let b = augment_batch(&batch, &policy, 7, 1).unwrap();
    assert_ne!(bits(&a.images), bits(&b.images));
}

#[test]
fn zero_policy_is_bitwise_identity() {
    let batch = random_batch(3, 4, 9, 11);
    let out = augment_batch(&batch, &AugmentationPolicy::none(), 5, 2).unwrap();
    assert_eq!(bits(&out.images), bits(&batch.images));
}

#[test]
fn invalid_policies_are_rejected() {
    let batch = random_batch(3, 1, 4, 4);
    for policy in [
        AugmentationPolicy {
            hflip_prob: 1.5,
            ..AugmentationPolicy::default()
        },
        AugmentationPolicy {
            shear_max_deg: 90.0,
            ..AugmentationPolicy::default()
        },
        AugmentationPolicy {
            width_shift_frac: -0.1,
            ..AugmentationPolicy::default()
        },
    ] {
        assert!(augment_batch(&batch, &policy, 0, 0).is_err());
    }
}

#[test]
fn images_below_two_by_two_are_rejected() {
    let t = SampledTransform::identity();
    for (h, w) in [(1, 5), (5, 1)] {
        assert!(apply_transform(&random_image(0, 1, h, w), &t, &AugmentationPolicy::none()).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn double_flip_is_identity(seed in any::<u64>(), h in 2usize..9, w in 2usize..9, hf in any::<bool>(), vf in any::<bool>()) {
        let input = random_image(seed, 3, h, w);
        let t = SampledTransform { hflip: hf, vflip: vf, ..SampledTransform::identity() };
        let policy = AugmentationPolicy::none();
        let twice = apply_transform(&apply_transform(&input, &t, &policy).unwrap(), &t, &policy).unwrap();
        prop_assert_eq!(bits(&twice), bits(&input));
    }

    #[test]
    fn nearest_fill_stays_within_input_range(seed in any::<u64>(), epoch in 0u64..4, h in 2usize..12, w in 2usize..12) {
        let input = random_image(seed, 2, h, w);
        let policy = AugmentationPolicy::default();
        let t = sample_transform(&policy, &mut sample_stream(seed, epoch, 0), h, w);
        let out = apply_transform(&input, &t, &policy).unwrap();
        let lo = input.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = input.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn constant_fill_stays_within_input_and_fill_range(seed in any::<u64>(), fill in -2.0f32..2.0, h in 2usize..12, w in 2usize..12) {
        let input = random_image(seed, 1, h, w);
        let policy = AugmentationPolicy { fill_mode: FillMode::Constant(fill), ..AugmentationPolicy::default() };
        let t = sample_transform(&policy, &mut sample_stream(seed, 0, 1), h, w);
        let out = apply_transform(&input, &t, &policy).unwrap();
        let lo = input.data().iter().cloned().fold(fill, f32::min);
        let hi = input.data().iter().cloned().fold(fill, f32::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn inverse_map_undoes_forward_map(seed in any::<u64>(), x in -5.0f64..20.0, y in -5.0f64..20.0) {
        let policy = AugmentationPolicy::default();
        let t = sample_transform(&policy, &mut sample_stream(seed, 0, 0), 16, 16);
        let [[a, b, tx], [c, d, ty]] = t.matrix;
        let (fx, fy) = (a * x + b * y + tx, c * x + d * y + ty);
        let (bx, by) = t.inverse_map(fx, fy).unwrap();
        prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
    }

    #[test]
    fn warp_preserves_shape(seed in any::<u64>(), c in 1usize..4, h in 2usize..10, w in 2usize..10) {
        let input = random_image(seed, c, h, w);
        let policy = AugmentationPolicy::default();
        let t = sample_transform(&policy, &mut sample_stream(seed, 1, 1), h, w);
        let out = apply_transform(&input, &t, &policy).unwrap();
        prop_assert_eq!(out.shape(), input.shape());
    }
}
