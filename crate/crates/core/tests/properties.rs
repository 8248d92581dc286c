//! Randomized checks of the module invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lensmtf::aggregate::{apply_compensation, azimuthal_average, gp_fit, gp_predict, GpConfig, LocalEstimate, COMPENSATION};
use lensmtf::estimator::{forward, predict_multi, ModelParams, NetConfig, StageSpec};
use lensmtf::geometry::{
    bilinear_sample, extract_rotated_patch_at, rotate_plane, sobel_gradient, Axis, ChannelStack, GlobalCoord,
};
use lensmtf::kernel_regression::{kr_fast, kr_naive, kr_naive_raw, rotate_to_common_frame, KrConfig};
use lensmtf::mtf_core::mtf_label_of_psf;
use lensmtf::oracle::{kr_grid_records, random_two_gaussian};
use lensmtf::psf_lab::{blur_patch, convolve_valid, synth_two_gaussian_psf};
use lensmtf::training_data::{gen_regular_pattern, PatternParams};
use lensmtf::Plane;

fn random_plane(w: usize, h: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Plane::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
}

fn smooth_plane(size: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, p) = (rng.random_range(0.02..0.08), rng.random_range(0.02..0.08), rng.random_range(0.0..6.0));
    Plane::from_fn(size, size, |x, y| 0.5 + 0.4 * (a * x as f64 + b * y as f64 + p).sin())
}

fn psf(seed: u64, size: usize) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_two_gaussian_psf(&random_two_gaussian(&mut rng, size), size).unwrap()
}

fn tiny_net() -> NetConfig {
    NetConfig {
        input_size: 12,
        subsample: 3,
        initial_kernel: 3,
        initial_width: 3,
        stages: vec![
            StageSpec {
                kernel: 3,
                width: 4,
                stride: 2,
            },
            StageSpec {
                kernel: 2,
                width: 5,
                stride: 2,
            },
        ],
        fc_widths: vec![6],
        outputs: 8,
        batch_norm: false,
    }
}

fn estimate(r: f64, ray: usize, values: [f64; 2]) -> LocalEstimate {
    LocalEstimate {
        location: GlobalCoord::new(r, 0.1 * ray as f64).unwrap(),
        ray,
        freqs_cy_mm: vec![10.0],
        radial: vec![values[0]],
        tangential: vec![values[1]],
        n_patches: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bilinear_hits_grid_and_stays_in_cell_range(seed in any::<u64>(), x in 0.0f64..14.0, y in 0.0f64..14.0) {
        let p = random_plane(16, 16, seed);
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        prop_assert_eq!(bilinear_sample(&p, xi as f64, yi as f64).unwrap(), p.get(xi, yi));
        let corners = [p.get(xi, yi), p.get(xi + 1, yi), p.get(xi, yi + 1), p.get(xi + 1, yi + 1)];
        let v = bilinear_sample(&p, x, y).unwrap();
        let (lo, hi) = corners.iter().fold((f64::MAX, f64::MIN), |(a, b), &c| (a.min(c), b.max(c)));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn unrotated_extraction_is_a_crop(seed in any::<u64>(), cx in 20usize..30, cy in 20usize..30) {
        let p = random_plane(50, 50, seed);
        let size = 9;
        let patch = extract_rotated_patch_at(&p, cx as f64, cy as f64, 0.0, size).unwrap();
        prop_assert_eq!(patch, p.crop(cx - size / 2, cy - size / 2, size, size).unwrap());
    }

    #[test]
    fn rotation_round_trip_on_smooth_images(seed in any::<u64>(), angle in -3.1f64..3.1) {
        let p = smooth_plane(64, seed);
        let back = rotate_plane(&rotate_plane(&p, angle, 0.0), -angle, 0.0);
        let err = back.crop(20, 20, 24, 24).unwrap().max_abs_diff(&p.crop(20, 20, 24, 24).unwrap());
        prop_assert!(err <= 0.02, "round trip error {err}");
    }

    #[test]
    fn sobel_of_constant_is_zero(v in 0.0f64..1.0, w in 3usize..12, h in 3usize..12) {
        let p = Plane::filled(w, h, v);
        for axis in [Axis::Horizontal, Axis::Vertical] {
            prop_assert!(sobel_gradient(&p, axis).unwrap().data().iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn subsample_inverse_on_stacks(m in 1usize..4, blocks in 1usize..4, c in 1usize..3, seed in any::<u64>()) {
        let side = m * blocks;
        let planes: Vec<Plane> = (0..c).map(|i| random_plane(side, side, seed ^ i as u64)).collect();
        let stack = ChannelStack::from_planes(&planes.iter().collect::<Vec<_>>()).unwrap();
        let sub = lensmtf::geometry::subsample_to_channels(&stack, m).unwrap();
        prop_assert_eq!(sub.channels(), c * m * m);
        prop_assert_eq!(lensmtf::geometry::inverse_subsample(&sub, m).unwrap(), stack);
    }

    #[test]
    fn two_gaussian_psf_is_normalized_and_half_turn_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = random_two_gaussian(&mut rng, 21);
        let k = synth_two_gaussian_psf(&params, 21).unwrap();
        prop_assert!(k.data().iter().all(|v| *v >= 0.0));
        prop_assert!((k.sum() - 1.0).abs() < 1e-9);
        params.rotation += std::f64::consts::PI;
        prop_assert!(synth_two_gaussian_psf(&params, 21).unwrap().max_abs_diff(&k) < 1e-12);
    }

    #[test]
    fn blur_is_linear_and_preserves_constants(seed in any::<u64>(), a in 0.0f64..0.5, b in 0.0f64..0.5, c in 0.0f64..1.0) {
        let k = psf(seed, 21);
        let (x1, x2) = (random_plane(32, 32, seed ^ 1), random_plane(32, 32, seed ^ 2));
        let mix = Plane::from_fn(32, 32, |x, y| a * x1.get(x, y) + b * x2.get(x, y));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lhs = blur_patch(&mix, &k, 0.0, &mut rng).unwrap();
        let (y1, y2) = (convolve_valid(&x1, &k).unwrap(), convolve_valid(&x2, &k).unwrap());
        let rhs = Plane::from_fn(lhs.width(), lhs.height(), |x, y| a * y1.get(x, y) + b * y2.get(x, y));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let flat = blur_patch(&Plane::filled(32, 32, c), &k, 0.0, &mut rng).unwrap();
        prop_assert!(flat.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn label_bounds_rotation_and_translation(seed in any::<u64>(), dx in -3isize..4, dy in -3isize..4) {
        let inner = psf(seed, 21);
        let k = Plane::from_fn(31, 31, |x, y| if (5..26).contains(&x) && (5..26).contains(&y) { inner.get(x - 5, y - 5) } else { 0.0 });
        let label = mtf_label_of_psf(&k).unwrap();
        prop_assert!(label.to_array().iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        let rotated = mtf_label_of_psf(&k.rotate_cw90()).unwrap();
        prop_assert!(rotated.swapped().mean_abs_error(&label) < 1e-6);
        let shifted = mtf_label_of_psf(&k.roll(dx, dy)).unwrap();
        prop_assert!(shifted.to_array().iter().zip(label.to_array()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn pattern_generator_is_deterministic(period in 6.0f64..30.0, rotation in -3.0f64..3.0) {
        let params = PatternParams { period, rotation, ..PatternParams::default() };
        prop_assert_eq!(gen_regular_pattern(&params, 64).unwrap(), gen_regular_pattern(&params, 64).unwrap());
    }

    #[test]
    fn predictions_are_in_unit_interval_and_order_free(seed in any::<u64>()) {
        let params = ModelParams::he_init(tiny_net(), seed).unwrap();
        let patches: Vec<Plane> = (0..3).map(|i| random_plane(12, 12, seed ^ i)).collect();
        let single = forward(&params, &patches[0]).unwrap();
        prop_assert!(single.to_array().iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert_eq!(predict_multi(&params, &patches[..1]).unwrap(), single);
        let reversed: Vec<Plane> = patches.iter().rev().cloned().collect();
        prop_assert_eq!(predict_multi(&params, &patches).unwrap(), predict_multi(&params, &reversed).unwrap());
        prop_assert_eq!(forward(&params, &patches[1].rotate_cw90()).unwrap(), forward(&params, &patches[1]).unwrap().swapped());
    }

    #[test]
    fn compensated_values_stay_in_unit_interval(v in proptest::collection::vec(0.0f64..1.0, 4)) {
        let out = apply_compensation(&v, &COMPENSATION).unwrap();
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn azimuthal_average_ignores_order(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut estimates: Vec<LocalEstimate> = (0..n)
            .map(|i| estimate(rng.random_range(0.0..10.0), i, [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]))
            .collect();
        let edges = [0.0, 2.5, 5.0, 7.5, 10.0];
        let before = azimuthal_average(&estimates, &edges).unwrap();
        estimates.reverse();
        estimates.rotate_left(n / 3);
        prop_assert_eq!(azimuthal_average(&estimates, &edges).unwrap(), before);
    }

    #[test]
    fn noise_free_gp_interpolates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(f64, f64)> = (0..8).map(|i| (2.0 * i as f64 + rng.random_range(0.0..0.5), rng.random_range(0.2..0.9))).collect();
        let cfg = GpConfig { signal_std: 0.3, lengthscale: 2.0, noise_std: 1e-6, jitter: 1e-10, optimize: false };
        let model = gp_fit(&samples, &cfg).unwrap();
        let grid: Vec<f64> = samples.iter().map(|s| s.0).collect();
        for (&(mean, _), &(_, y)) in gp_predict(&model, &grid).iter().zip(&samples) {
            prop_assert!((mean - y).abs() < 1e-6, "{mean} vs {y}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn kernel_regression_is_convex_and_continuous(seed in any::<u64>(), r in 0.5f64..4.0, phi in -3.0f64..3.0) {
        let records = kr_grid_records(3, 4, 31, seed).unwrap();
        let cfg = KrConfig::for_grid(1.0, 1.5);
        let q = GlobalCoord::new(r, phi).unwrap();
        let q2 = GlobalCoord::new(r + 1e-6, phi).unwrap();
        let lo = records.iter().flat_map(|rec| rec.kernel().data().iter().copied()).fold(f64::MAX, f64::min);
        let hi = records.iter().flat_map(|rec| rec.kernel().data().iter().copied()).fold(f64::MIN, f64::max);
        let raw = kr_naive_raw(&records, q, &cfg).unwrap();
        prop_assert!(raw.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        prop_assert!(kr_naive(&records, q, &cfg).unwrap().max_abs_diff(&kr_naive(&records, q2, &cfg).unwrap()) < 1e-6);
        let rotated = rotate_to_common_frame(&records).unwrap();
        prop_assert!(kr_fast(&rotated, q, &cfg).unwrap().max_abs_diff(&kr_fast(&rotated, q2, &cfg).unwrap()) < 1e-6);
    }
}
