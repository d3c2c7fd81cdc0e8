//! Individual image transformations. Inputs and outputs hold values in
//! `[0, 1]` unless stated otherwise.

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};

/// Luma weights for (r, g, b).
pub const LUMA: [f32; 3] = [0.2989, 0.5870, 0.1140];

/// Attempts at sampling a crop window before falling back to a center crop.
pub const CROP_ATTEMPTS: usize = 10;

/// Axis-aligned crop window in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws a crop window whose area fraction is uniform on `area_range` and
/// whose aspect ratio (width / height) is log-uniform on the part of
/// `aspect_range` that fits inside the image at that area.
///
/// A draw whose feasible aspect interval is empty is rejected; after
/// [`CROP_ATTEMPTS`] rejections the largest centered window with an aspect
/// ratio clamped to `aspect_range` is returned.
pub fn sample_crop(
    height: usize,
    width: usize,
    area_range: (f32, f32),
    aspect_range: (f32, f32),
    rng: &mut impl Rng,
) -> CropWindow {
    let (h, w) = (height as f64, width as f64);
    let area = h * w;
    let (lo_ratio, hi_ratio) = (f64::from(aspect_range.0), f64::from(aspect_range.1));
    for _ in 0..CROP_ATTEMPTS {
        let frac = uniform(rng, f64::from(area_range.0), f64::from(area_range.1));
        let target = frac * area;
        // width = sqrt(target * r) <= w and height = sqrt(target / r) <= h
        let r_min = lo_ratio.max(target / (h * h));
        let r_max = hi_ratio.min(w * w / target);
        if r_min > r_max {
            continue;
        }
        let ratio = uniform(rng, r_min.ln(), r_max.ln()).exp();
        let cw = ((target * ratio).sqrt().round() as usize).clamp(1, width);
        let ch = ((target / ratio).sqrt().round() as usize).clamp(1, height);
        let top = rng.random_range(0..=height - ch);
        let left = rng.random_range(0..=width - cw);
        return CropWindow { top, left, height: ch, width: cw };
    }
    center_crop_window(height, width, aspect_range)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn center_crop_window(height: usize, width: usize, aspect_range: (f32, f32)) -> CropWindow {
    let in_ratio = width as f32 / height as f32;
    let (ch, cw) = if in_ratio < aspect_range.0 {
        (((width as f32 / aspect_range.0).round() as usize).clamp(1, height), width)
    } else if in_ratio > aspect_range.1 {
        (height, ((height as f32 * aspect_range.1).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    CropWindow { top: (height - ch) / 2, left: (width - cw) / 2, height: ch, width: cw }
}

/// Cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-index taps `(first source index, weights)` for resampling
/// `[start, start + len)` onto `out` samples, clamping at the window edges.
fn cubic_taps(start: usize, len: usize, out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            let mut total = 0.0;
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as f64 - 1.0;
                let idx = (base + offset).clamp(0.0, (len - 1) as f64) as usize;
                let w = cubic(offset - t);
                *tap = (start + idx, w);
                total += w;
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Bicubic resampling of `window` to `out_h x out_w`, clamped to `[0, 1]`.
pub fn resize_bicubic(img: &Image, window: CropWindow, out_h: usize, out_w: usize) -> Image {
    let ytaps = cubic_taps(window.top, window.height, out_h);
    let xtaps = cubic_taps(window.left, window.width, out_w);
    let mut tmp = vec![0.0f64; window.height * out_w];
    let mut out = Image::filled(img.channels, out_h, out_w, 0.0);
    for c in 0..img.channels {
        for (ry, y) in (window.top..window.top + window.height).enumerate() {
            for (ox, taps) in xtaps.iter().enumerate() {
                tmp[ry * out_w + ox] =
                    taps.iter().map(|&(x, w)| w * f64::from(img.at(c, y, x))).sum();
            }
        }
        for (oy, taps) in ytaps.iter().enumerate() {
            for ox in 0..out_w {
                let v: f64 = taps
                    .iter()
                    .map(|&(y, w)| w * tmp[(y - window.top) * out_w + ox])
                    .sum();
                *out.at_mut(c, oy, ox) = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

pub fn random_resized_crop(
    img: &Image,
    target: (usize, usize),
    area_range: (f32, f32),
    aspect_range: (f32, f32),
    rng: &mut impl Rng,
) -> Image {
    let window = sample_crop(img.height, img.width, area_range, aspect_range, rng);
    resize_bicubic(img, window, target.0, target.1)
}

/// Resizes the shorter side to `target * 8 / 7`, then takes a centered
/// `target` crop.
pub fn eval_resize_center_crop(img: &Image, target: (usize, usize)) -> Image {
    let short = img.height.min(img.width) as f64;
    let side = (target.0.max(target.1) as f64 * 8.0 / 7.0).round();
    let scale = side / short;
    let rh = ((img.height as f64 * scale).round() as usize).max(target.0);
    let rw = ((img.width as f64 * scale).round() as usize).max(target.1);
    let full = CropWindow { top: 0, left: 0, height: img.height, width: img.width };
    let resized = resize_bicubic(img, full, rh, rw);
    let window = CropWindow {
        top: (rh - target.0) / 2,
        left: (rw - target.1) / 2,
        height: target.0,
        width: target.1,
    };
    crop(&resized, window)
}

pub fn crop(img: &Image, w: CropWindow) -> Image {
    let mut out = Image::filled(img.channels, w.height, w.width, 0.0);
    for c in 0..img.channels {
        for y in 0..w.height {
            for x in 0..w.width {
                *out.at_mut(c, y, x) = img.at(c, w.top + y, w.left + x);
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

fn luma_at(img: &Image, y: usize, x: usize) -> f32 {
    LUMA[0] * img.at(0, y, x) + LUMA[1] * img.at(1, y, x) + LUMA[2] * img.at(2, y, x)
}

/// Replaces every channel with the pixel's luma.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "grayscale needs 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma_at(img, y, x);
            for c in 0..3 {
                *out.at_mut(c, y, x) = l;
            }
        }
    }
    Ok(out)
}

/// `x + delta`, clamped.
pub fn adjust_brightness(img: &Image, delta: f32) -> Image {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
    out
}

/// Scales deviations from the mean luma of the image by `1 + delta`.
pub fn adjust_contrast(img: &Image, delta: f32) -> Image {
    let mean = if img.channels == 3 {
        let n = (img.height * img.width) as f32;
        let mut s = 0.0;
        for y in 0..img.height {
            for x in 0..img.width {
                s += luma_at(img, y, x);
            }
        }
        s / n
    } else {
        img.pixels.iter().sum::<f32>() / img.pixels.len() as f32
    };
    let factor = 1.0 + delta;
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0));
    out
}

/// Scales each pixel's deviation from its own luma by `1 + delta`.
pub fn adjust_saturation(img: &Image, delta: f32) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let factor = 1.0 + delta;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma_at(img, y, x);
            for c in 0..3 {
                let v = img.at(c, y, x);
                *out.at_mut(c, y, x) = ((v - l) * factor + l).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` full turns.
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (r, g, b) = (
                f64::from(img.at(0, y, x)),
                f64::from(img.at(1, y, x)),
                f64::from(img.at(2, y, x)),
            );
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb(h + f64::from(shift), s, v);
            *out.at_mut(0, y, x) = r.clamp(0.0, 1.0) as f32;
            *out.at_mut(1, y, x) = g.clamp(0.0, 1.0) as f32;
            *out.at_mut(2, y, x) = b.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jitter {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Color jitter with offsets uniform on `±max` for each adjustment, applied
/// in a random order.
pub fn color_jitter(img: &Image, max: [f32; 4], rng: &mut impl Rng) -> Image {
    let mut order = [Jitter::Brightness, Jitter::Contrast, Jitter::Saturation, Jitter::Hue];
    // Fisher-Yates; drawn before the offsets so the stream layout is fixed.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let offsets: [f32; 4] = std::array::from_fn(|k| {
        if max[k] > 0.0 {
            rng.random_range(-max[k]..=max[k])
        } else {
            0.0
        }
    });
    let mut out = img.clone();
    for op in order {
        out = match op {
            Jitter::Brightness if max[0] > 0.0 => adjust_brightness(&out, offsets[0]),
            Jitter::Contrast if max[1] > 0.0 => adjust_contrast(&out, offsets[1]),
            Jitter::Saturation if max[2] > 0.0 => adjust_saturation(&out, offsets[2]),
            Jitter::Hue if max[3] > 0.0 => adjust_hue(&out, offsets[3]),
            _ => out,
        };
    }
    out
}

/// Odd kernel side nearest to `fraction * height`, at least 3.
pub fn blur_kernel_size(height: usize, fraction: f32) -> usize {
    let raw = fraction * height as f32;
    let odd = 2.0 * ((raw - 1.0) / 2.0).round() + 1.0;
    (odd.max(3.0)) as usize
}

/// Normalized 1-D Gaussian weights of length `size`.
pub fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let r = (size / 2) as f64;
    let s = f64::from(sigma);
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * s * s)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian filter with reflect padding.
pub fn gaussian_blur(img: &Image, size: usize, sigma: f32) -> Image {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0f32; h * w];
    let mut out = img.clone();
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum::<f32>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn solarize_value(x: f32) -> f32 {
    if x < 0.5 {
        x
    } else {
        1.0 - x
    }
}

pub fn solarize(img: &Image) -> Image {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v = solarize_value(*v));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let n = c * h * w;
        Image::new(c, h, w, (0..n).map(|i| i as f32 / n as f32).collect())
    }

    fn max_abs_diff(a: &Image, b: &Image) -> f32 {
        a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn whole_image_crop_is_plain_resize() {
        let img = ramp(3, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = sample_crop(12, 12, (1.0, 1.0), (1.0, 1.0), &mut rng);
        assert_eq!(w, CropWindow { top: 0, left: 0, height: 12, width: 12 });
        let out = random_resized_crop(&img, (12, 12), (1.0, 1.0), (1.0, 1.0), &mut rng);
        // Identity resampling: the cubic kernel interpolates.
        assert!(max_abs_diff(&out, &img) < 1e-6);
    }

    #[test]
    fn crop_output_always_target_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(5, 30), (30, 5), (1, 1), (17, 9)] {
            let img = ramp(3, h, w);
            let out = random_resized_crop(&img, (8, 6), (0.08, 1.0), (0.75, 4.0 / 3.0), &mut rng);
            assert_eq!((out.channels, out.height, out.width), (3, 8, 6));
        }
    }

    #[test]
    fn extreme_aspect_falls_back_to_center_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // A 1x40 strip cannot hold a window with ratio <= 4/3 at area >= 8%.
        let w = sample_crop(1, 40, (0.5, 1.0), (0.75, 4.0 / 3.0), &mut rng);
        assert_eq!(w.height, 1);
        assert_eq!(w.width, 1);
        assert_eq!(w.left, 19);
    }

    #[test]
    fn grayscale_luma() {
        let red = Image::new(3, 1, 1, vec![1.0, 0.0, 0.0]);
        let g = to_grayscale(&red).unwrap();
        assert_eq!(g.pixels, vec![0.2989; 3]);

        let white = Image::filled(3, 1, 1, 1.0);
        let g = to_grayscale(&white).unwrap();
        // coefficients sum to 0.9999
        assert!(g.pixels.iter().all(|&v| (v - 0.9999).abs() < 1e-6));

        let gray = Image::filled(3, 2, 2, 0.4);
        let g = to_grayscale(&gray).unwrap();
        assert!(g.pixels.iter().all(|&v| (v - 0.4 * 0.9999).abs() < 1e-6));

        assert!(to_grayscale(&Image::filled(1, 2, 2, 0.5)).is_err());
    }

    #[test]
    fn solarize_branches() {
        assert_eq!(solarize_value(0.2), 0.2);
        assert!((solarize_value(0.7) - 0.3).abs() < 1e-7);
        assert_eq!(solarize_value(0.5), 0.5);
    }

    #[test]
    fn jitter_zero_intensity_is_identity() {
        let img = ramp(3, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(color_jitter(&img, [0.0; 4], &mut rng), img);
    }

    #[test]
    fn brightness_offset_on_constant_image() {
        let img = Image::filled(3, 4, 4, 0.3);
        let out = adjust_brightness(&img, 0.25);
        assert!(out.pixels.iter().all(|&v| (v - 0.55).abs() < 1e-7));
        let out = adjust_brightness(&img, 0.9);
        assert!(out.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_hue_cycle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::new(3, 5, 5, (0..75).map(|_| rng.random_range(0.0..1.0)).collect());
        for shift in [1.0, -1.0, 2.0] {
            assert!(max_abs_diff(&adjust_hue(&img, shift), &img) < 1e-6);
        }
        // a non-trivial rotation does change a saturated color
        let red = Image::new(3, 1, 1, vec![1.0, 0.0, 0.0]);
        let green = adjust_hue(&red, 1.0 / 3.0);
        assert!(max_abs_diff(&green, &Image::new(3, 1, 1, vec![0.0, 1.0, 0.0])) < 1e-6);
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        for sigma in [0.1, 0.5, 1.0, 2.0] {
            for size in [3, 5, 23] {
                let s: f32 = gaussian_kernel(size, sigma).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_kernel_scales_with_resolution() {
        assert_eq!(blur_kernel_size(224, 23.0 / 224.0), 23);
        assert_eq!(blur_kernel_size(32, 23.0 / 224.0), 3);
        assert_eq!(blur_kernel_size(64, 23.0 / 224.0), 7);
        assert_eq!(blur_kernel_size(8, 23.0 / 224.0), 3);
    }

    #[test]
    fn blur_near_delta_and_constant() {
        let img = ramp(3, 9, 9);
        let out = gaussian_blur(&img, 5, 0.1);
        assert!(max_abs_diff(&out, &img) < 1e-3);
        let flat = Image::filled(3, 7, 7, 0.42);
        let out = gaussian_blur(&flat, 7, 2.0);
        assert!(max_abs_diff(&out, &flat) < 1e-6);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn eval_crop_shape() {
        let img = ramp(3, 16, 20);
        let out = eval_resize_center_crop(&img, (14, 14));
        assert_eq!((out.height, out.width), (14, 14));
    }
}
