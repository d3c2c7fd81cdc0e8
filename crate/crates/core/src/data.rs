//! In-memory image datasets: the CIFAR-10 binary format and a synthetic
//! class-conditional blob dataset.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One `C x H x W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), channels * height * width, "pixel buffer size");
        Self { channels, height, width, pixels }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.pixels[c * n..(c + 1) * n]
    }
}

/// A labelled set of equally-shaped images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn push(&mut self, image: &Image, label: usize) {
        assert_eq!(
            (image.channels, image.height, image.width),
            (self.channels, self.height, self.width),
            "image shape"
        );
        self.pixels.extend_from_slice(&image.pixels);
        self.labels.push(label);
    }

    pub fn image(&self, i: usize) -> Image {
        let n = self.image_len();
        Image::new(self.channels, self.height, self.width, self.pixels[i * n..(i + 1) * n].to_vec())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// First `n` images (or all of them).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let plane = self.height * self.width;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.pixels.chunks(self.image_len().max(1)) {
            for c in 0..self.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    mean[c] += f64::from(v);
                    sq[c] += f64::from(v).powi(2);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mut m = Vec::with_capacity(self.channels);
        let mut s = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mu = mean[c] / count;
            let var = (sq[c] / count - mu * mu).max(0.0);
            m.push(mu as f32);
            s.push(var.sqrt().max(1e-3) as f32);
        }
        (m, s)
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses a CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (red plane, green plane, blue plane).
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<ImageSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, &path.display().to_string())
}

pub fn parse_cifar10(bytes: &[u8], origin: &str) -> Result<ImageSet> {
    let full = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated { path: origin.to_string(), offset: full * CIFAR_RECORD });
    }
    let mut set = ImageSet::empty(3, CIFAR_SIDE, CIFAR_SIDE);
    set.pixels.reserve(full * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = usize::from(rec[0]);
        if label > 9 {
            return Err(Error::InvalidArgument(format!(
                "{origin}: label {label} out of range at byte offset {}",
                r * CIFAR_RECORD
            )));
        }
        set.pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        set.labels.push(label);
    }
    Ok(set)
}

/// Loads and concatenates several CIFAR-10 batch files.
pub fn load_cifar10_files(paths: &[impl AsRef<Path>]) -> Result<ImageSet> {
    let mut out = ImageSet::empty(3, CIFAR_SIDE, CIFAR_SIDE);
    for p in paths {
        let part = load_cifar10(p)?;
        out.pixels.extend_from_slice(&part.pixels);
        out.labels.extend_from_slice(&part.labels);
    }
    Ok(out)
}

/// Appearance knobs of [`synth_clusters_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStyle {
    /// Amplitude of per-image smooth background color fields.
    pub background: f32,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise: f32,
    /// Radius of the class blob as a fraction of the image side.
    pub blob_radius: f32,
    /// Random offset of the blob center as a fraction of the image side.
    pub position_jitter: f32,
    /// Stripe period as a fraction of the image side.
    pub stripe_period: f32,
    /// Depth of the stripe modulation inside the blob, in [0, 1].
    pub stripe_contrast: f32,
    /// Per-image stripe rotation, as a fraction of the angle between
    /// neighboring classes.
    pub orientation_jitter: f32,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            background: 0.35,
            noise: 0.08,
            blob_radius: 0.22,
            position_jitter: 0.08,
            stripe_period: 0.25,
            stripe_contrast: 0.5,
            orientation_jitter: 0.0,
        }
    }
}

/// Class-conditional images with the default [`SynthStyle`]; see
/// [`synth_clusters_with`].
pub fn synth_clusters(n_classes: usize, n_per_class: usize, image_size: usize, seed: u64) -> ImageSet {
    synth_clusters_with(n_classes, n_per_class, image_size, seed, &SynthStyle::default())
}

/// Class `c` is a striped blob at a class-specific position on a circle
/// around the image center. Stripe orientations are spread over
/// `[0°, 90°]`, so no two classes are mirror images of each other. Blob
/// color, background and stripe phase are drawn per image, so color alone
/// carries no class information. Images are interleaved by class
/// (0, 1, .., C-1, 0, ..).
pub fn synth_clusters_with(
    n_classes: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
    style: &SynthStyle,
) -> ImageSet {
    use std::f32::consts::{FRAC_PI_2, TAU};
    let s = image_size;
    let mut set = ImageSet::empty(3, s, s);
    let root = RngStream::new(seed);
    let side = s as f32;
    let spread = if n_classes > 1 { FRAC_PI_2 / (n_classes - 1) as f32 } else { 0.0 };
    for k in 0..n_per_class {
        for c in 0..n_classes {
            let idx = (k * n_classes + c) as u64;
            let mut rng = root.split(idx).rng();
            let angle = TAU * c as f32 / n_classes as f32;
            let turn = style.orientation_jitter * rng.random_range(-0.5f32..0.5);
            let (so, co) = (spread * (c as f32 + turn)).sin_cos();
            let cx = 0.5 + 0.25 * angle.cos() + style.position_jitter * rng.random_range(-1.0f32..1.0);
            let cy = 0.5 + 0.25 * angle.sin() + style.position_jitter * rng.random_range(-1.0f32..1.0);
            let radius = style.blob_radius * rng.random_range(0.8f32..1.2);
            let blob_color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55f32..1.0));
            let bg_base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05f32..0.35));
            let bg_grad: [[f32; 2]; 3] = std::array::from_fn(|_| {
                [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)]
            });
            let phase = rng.random_range(0.0f32..TAU);
            let freq = TAU / (style.stripe_period * side).max(1.0);
            let mut img = Image::filled(3, s, s, 0.0);
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = ((x as f32 + 0.5) / side, (y as f32 + 0.5) / side);
                    let d2 = ((u - cx).powi(2) + (v - cy).powi(2)) / (radius * radius);
                    let mask = (-d2 * d2).exp();
                    let along = (x as f32 * co + y as f32 * so) * freq + phase;
                    let texture = 1.0 - style.stripe_contrast * 0.5 * (1.0 - along.sin());
                    for ch in 0..3 {
                        let bg = bg_base[ch]
                            + style.background * 0.5 * (bg_grad[ch][0] * (u - 0.5) + bg_grad[ch][1] * (v - 0.5));
                        let fg = blob_color[ch] * texture;
                        let noise = style.noise * standard_normal(&mut rng);
                        *img.at_mut(ch, y, x) = (bg * (1.0 - mask) + fg * mask + noise).clamp(0.0, 1.0);
                    }
                }
            }
            set.push(&img, c);
        }
    }
    set
}

fn standard_normal(rng: &mut impl Rng) -> f32 {
    // Box-Muller; one of the pair is discarded.
    let u1: f32 = rng.random_range(f32::EPSILON..1.0);
    let u2: f32 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}
