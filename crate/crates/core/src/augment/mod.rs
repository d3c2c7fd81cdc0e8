//! The two view-generating augmentation distributions.
//!
//! A view is produced by composing, in this order and each gated by its own
//! probability: random resized crop, horizontal flip, color jitter,
//! grayscale, Gaussian blur, solarization. The result is then normalized
//! per channel with dataset statistics.

pub mod primitives;

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use primitives::*;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationParams {
    pub crop_prob: f32,
    pub flip_prob: f32,
    pub jitter_prob: f32,
    pub brightness_max: f32,
    pub contrast_max: f32,
    pub saturation_max: f32,
    pub hue_max: f32,
    pub grayscale_prob: f32,
    pub blur_prob: f32,
    pub solarize_prob: f32,
    pub target_size: (usize, usize),
    pub area_range: (f32, f32),
    pub aspect_ratio_range: (f32, f32),
    pub blur_kernel_fraction: f32,
    pub blur_sigma_range: (f32, f32),
}

impl AugmentationParams {
    /// Distribution T: blur always, never solarize.
    pub fn view_one(target: usize) -> Self {
        Self {
            crop_prob: 1.0,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness_max: 0.4,
            contrast_max: 0.4,
            saturation_max: 0.2,
            hue_max: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 1.0,
            solarize_prob: 0.0,
            target_size: (target, target),
            area_range: (0.08, 1.0),
            aspect_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            blur_kernel_fraction: 23.0 / 224.0,
            blur_sigma_range: (0.1, 2.0),
        }
    }

    /// Distribution T′: rare blur, occasional solarization.
    pub fn view_two(target: usize) -> Self {
        Self { blur_prob: 0.1, solarize_prob: 0.2, ..Self::view_one(target) }
    }

    /// Every primitive disabled; only resizing to `target` remains.
    pub fn identity(target: usize) -> Self {
        Self {
            crop_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..Self::view_one(target)
        }
    }

    /// Random resized crop and horizontal flip; color, blur and
    /// solarization removed.
    pub fn crop_and_flip(target: usize) -> Self {
        Self { flip_prob: 0.5, crop_prob: 1.0, ..Self::identity(target) }
    }

    /// Random resized crop alone.
    pub fn crop_only(target: usize) -> Self {
        Self { crop_prob: 1.0, ..Self::identity(target) }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("crop_prob", self.crop_prob),
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let intensities = [
            self.brightness_max,
            self.contrast_max,
            self.saturation_max,
            self.hue_max,
            self.blur_kernel_fraction,
        ];
        if intensities.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("negative augmentation intensity".into()));
        }
        let (a0, a1) = self.area_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::InvalidArgument(format!("area_range ({a0}, {a1}) not within (0, 1]")));
        }
        let (r0, r1) = self.aspect_ratio_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::InvalidArgument(format!("aspect_ratio_range ({r0}, {r1})")));
        }
        let (s0, s1) = self.blur_sigma_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::InvalidArgument(format!("blur_sigma_range ({s0}, {s1})")));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::InvalidArgument("target_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn apply(&self, img: &mut Image) {
        for c in 0..img.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            img.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

fn bernoulli(rng: &mut impl Rng, p: f32) -> bool {
    // Always consume one draw so later primitives see the same stream
    // regardless of earlier gates.
    let u: f32 = rng.random();
    u < p
}

/// Samples and applies one transformation; values stay in `[0, 1]`.
pub fn augment_unnormalized(img: &Image, params: &AugmentationParams, stream: RngStream) -> Image {
    let mut rng = stream.rng();
    let target = params.target_size;
    let mut out = if bernoulli(&mut rng, params.crop_prob) {
        random_resized_crop(img, target, params.area_range, params.aspect_ratio_range, &mut rng)
    } else if (img.height, img.width) == target {
        img.clone()
    } else {
        let full = CropWindow { top: 0, left: 0, height: img.height, width: img.width };
        resize_bicubic(img, full, target.0, target.1)
    };
    if bernoulli(&mut rng, params.flip_prob) {
        out = flip_horizontal(&out);
    }
    if bernoulli(&mut rng, params.jitter_prob) {
        let max = [params.brightness_max, params.contrast_max, params.saturation_max, params.hue_max];
        out = color_jitter(&out, max, &mut rng);
    }
    if bernoulli(&mut rng, params.grayscale_prob) && out.channels == 3 {
        out = to_grayscale(&out).expect("three channels");
    }
    let blur = bernoulli(&mut rng, params.blur_prob);
    let sigma = rng.random_range(params.blur_sigma_range.0..=params.blur_sigma_range.1);
    if blur {
        let size = blur_kernel_size(out.height, params.blur_kernel_fraction);
        out = gaussian_blur(&out, size, sigma);
    }
    if bernoulli(&mut rng, params.solarize_prob) {
        out = solarize(&out);
    }
    out
}

/// Full pipeline: sampled transformation followed by channel normalization.
pub fn apply_pipeline(
    img: &Image,
    params: &AugmentationParams,
    norm: &ChannelNorm,
    stream: RngStream,
) -> Image {
    let mut out = augment_unnormalized(img, params, stream);
    norm.apply(&mut out);
    out
}

/// Deterministic evaluation preprocessing: resize, center crop, normalize.
pub fn eval_transform(img: &Image, target: (usize, usize), norm: &ChannelNorm) -> Image {
    let mut out = if (img.height, img.width) == target {
        img.clone()
    } else {
        eval_resize_center_crop(img, target)
    };
    norm.apply(&mut out);
    out
}
