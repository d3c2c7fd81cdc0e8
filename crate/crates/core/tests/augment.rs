use byol_core::augment::primitives::{
    flip_horizontal, gaussian_blur, sample_crop, solarize_value, to_grayscale,
};
use byol_core::augment::{augment_unnormalized, AugmentationParams};
use byol_core::data::Image;
use byol_core::rng::RngStream;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Kolmogorov-Smirnov distance between a sample and the uniform law on `[lo, hi]`.
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn crop_area_fraction_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let side = 224;
    let mut fractions = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let w = sample_crop(side, side, (0.08, 1.0), (3.0 / 4.0, 4.0 / 3.0), &mut rng);
        assert!(w.top + w.height <= side && w.left + w.width <= side);
        let ratio = w.width as f64 / w.height as f64;
        // Rounding to whole pixels can nudge the ratio slightly past the bounds.
        assert!(ratio > 0.75 * 0.97 && ratio < 4.0 / 3.0 * 1.03, "ratio {ratio}");
        fractions.push((w.height * w.width) as f64 / (side * side) as f64);
    }
    let d = ks_uniform(fractions, 0.08, 1.0);
    assert!(d < 0.02, "KS distance {d}");
}

#[test]
fn ks_oracle_detects_a_skewed_sample() {
    let skewed: Vec<f64> = (0..10_000).map(|i| (i as f64 / 10_000.0).powi(2)).collect();
    assert!(ks_uniform(skewed, 0.0, 1.0) > 0.2);
    let even: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
    assert!(ks_uniform(even, 0.0, 1.0) < 1e-3);
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (prop_oneof![Just(1usize), Just(3usize)], 4usize..20, 4usize..20).prop_flat_map(|(c, h, w)| {
        proptest::collection::vec(0.0f32..=1.0, c * h * w).prop_map(move |px| Image::new(c, h, w, px))
    })
}

fn params_strategy() -> impl Strategy<Value = AugmentationParams> {
    (
        prop_oneof![Just(AugmentationParams::view_one(8)), Just(AugmentationParams::view_two(8))],
        3usize..14,
        3usize..14,
        0.05f32..0.9,
    )
        .prop_map(|(base, h, w, area_min)| AugmentationParams {
            target_size: (h, w),
            area_range: (area_min, 1.0),
            ..base
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_have_the_target_shape_and_unit_range(img in image_strategy(), params in params_strategy(), seed in any::<u64>()) {
        let out = augment_unnormalized(&img, &params, RngStream::new(seed));
        prop_assert_eq!((out.channels, out.height, out.width), (img.channels, params.target_size.0, params.target_size.1));
        prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = augment_unnormalized(&img, &params, RngStream::new(seed));
        prop_assert_eq!(out, again);
    }

    #[test]
    fn crop_windows_fit_inside_the_image(h in 1usize..64, w in 1usize..64, lo in 0.01f32..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let win = sample_crop(h, w, (lo, 1.0), (3.0 / 4.0, 4.0 / 3.0), &mut rng);
        prop_assert!(win.height >= 1 && win.width >= 1);
        prop_assert!(win.top + win.height <= h && win.left + win.width <= w);
    }

    #[test]
    fn double_flip_is_identity(img in image_strategy()) {
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn grayscale_channels_agree(img in image_strategy()) {
        prop_assume!(img.channels == 3);
        let g = to_grayscale(&img).unwrap();
        prop_assert_eq!(g.plane(0), g.plane(1));
        prop_assert_eq!(g.plane(1), g.plane(2));
    }

    #[test]
    fn blur_preserves_range_and_constants(img in image_strategy(), sigma in 0.1f32..2.0, v in 0.0f32..=1.0) {
        let out = gaussian_blur(&img, 3, sigma);
        prop_assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let flat = Image::filled(img.channels, img.height, img.width, v);
        let blurred = gaussian_blur(&flat, 5, sigma);
        prop_assert!(blurred.pixels.iter().all(|p| (p - v).abs() < 1e-5));
    }

    #[test]
    fn solarization_folds_the_upper_half(x in 0.0f32..=1.0) {
        let y = solarize_value(x);
        prop_assert!(y <= 0.5);
        prop_assert_eq!(solarize_value(y), y);
    }
}
