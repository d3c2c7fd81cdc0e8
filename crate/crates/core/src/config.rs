//! Run configuration and its line-oriented `key = value` text form.
//!
//! ```text
//! # comment
//! seed = 7
//! loss.family = infonce
//! model.encoder_widths = 64,32
//! ```
//!
//! Keys are dotted paths; values are typed scalars or comma-separated
//! lists. Serialization writes every key in a fixed order, so
//! `to_text(parse(text))` is a fixed point.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::AugmentationParams;
use crate::data::SynthStyle;
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, EncoderKind, TargetMode};
use crate::objective::{LossFamily, LossSpec, Normalization};
use crate::optim::{LarsConfig, Schedule, TauSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Cifar10 => "cifar10",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synth" => Some(Self::Synth),
            "cifar10" => Some(Self::Cifar10),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// CIFAR-10 training batch files, comma-separated in text form.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// Keep only the first `limit` training images (0 keeps all).
    pub limit: usize,
    pub test_limit: usize,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub style: SynthStyle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSpec {
    pub base_lr: f64,
    /// Images per sub-batch.
    pub batch_size: usize,
    /// Number of sub-batches whose gradients are averaged per update.
    pub accumulation: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub tau_base: f64,
    pub tau_schedule: TauSchedule,
    pub predictor_lr_mult: f64,
    pub projector_lr_mult: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    /// Write a checkpoint every this many updates (0 = final only).
    pub checkpoint_every: u64,
    pub histogram_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rates: Vec<f64>,
    pub val_fraction: f64,
    /// Extra crop-and-flip copies of every training image.
    pub augment_copies: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ArchitectureSpec,
    pub loss: LossSpec,
    pub optim: OptimSpec,
    pub aug_t: AugmentationParams,
    pub aug_tp: AugmentationParams,
    pub train: TrainSpec,
    pub probe: ProbeSpec,
}

pub const PRESETS: [&str; 4] = ["desk", "full", "ablation", "small-batch"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Synthetic images, MLP encoder; the configuration the test suites
    /// train with.
    pub fn desk() -> Self {
        let input = 16;
        Self {
            preset: "desk".into(),
            seed: 0,
            threads: 1,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec {
                kind: DatasetKind::Synth,
                train_files: Vec::new(),
                test_files: Vec::new(),
                limit: 0,
                test_limit: 0,
                classes: 4,
                per_class: 128,
                test_per_class: 250,
                image_size: 20,
                seed: 0,
                style: SynthStyle { position_jitter: 0.25, noise: 0.2, ..SynthStyle::default() },
            },
            model: ArchitectureSpec {
                encoder: EncoderKind::Mlp,
                encoder_widths: vec![128, 32],
                input_channels: 3,
                input_size: input,
                projector_hidden: 128,
                projection_dim: 32,
                // Without batch statistics a fast target can collapse, which
                // the desk-scale decay sweeps rely on seeing.
                batch_norm: false,
            },
            loss: LossSpec::default(),
            optim: OptimSpec {
                base_lr: 0.3,
                batch_size: 32,
                accumulation: 1,
                warmup_steps: 100,
                total_steps: 2000,
                momentum: 0.9,
                weight_decay: 1e-6,
                // At batch 32 the usual 1e-3 barely moves the weights.
                trust_coefficient: 0.03,
                tau_base: 0.99,
                tau_schedule: TauSchedule::Cosine,
                predictor_lr_mult: 1.0,
                projector_lr_mult: 1.0,
            },
            aug_t: AugmentationParams { area_range: (0.25, 1.0), ..AugmentationParams::view_one(input) },
            aug_tp: AugmentationParams { area_range: (0.25, 1.0), ..AugmentationParams::view_two(input) },
            train: TrainSpec { checkpoint_every: 0, histogram_every: 50 },
            probe: ProbeSpec {
                epochs: 40,
                batch_size: 256,
                momentum: 0.9,
                learning_rates: vec![0.4, 0.3, 0.2, 0.1, 0.05],
                val_fraction: 0.2,
                augment_copies: 0,
                weight_decay: 0.0,
            },
        }
    }

    /// Small convolutional encoder on CIFAR-10 with the long-run optimizer
    /// settings: lr 0.2, weight decay 1.5e-6, τ_base 0.996.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.preset = "full".into();
        c.dataset.kind = DatasetKind::Cifar10;
        c.dataset.image_size = 32;
        c.dataset.classes = 10;
        c.model = ArchitectureSpec::desk_conv();
        c.aug_t = AugmentationParams::view_one(32);
        c.aug_tp = AugmentationParams::view_two(32);
        c.optim.base_lr = 0.2;
        c.optim.weight_decay = 1.5e-6;
        c.optim.trust_coefficient = 1e-3;
        c.optim.tau_base = 0.996;
        c.optim.batch_size = 256;
        c.optim.warmup_steps = 500;
        c.optim.total_steps = 20_000;
        c
    }

    /// Short-run optimizer settings (lr 0.3, weight decay 1e-6, τ_base 0.99)
    /// with the β-weighted contrastive objective.
    pub fn ablation() -> Self {
        let mut c = Self::full();
        c.preset = "ablation".into();
        // β then moves a row between the bootstrap and contrastive wirings;
        // at β = 0 with a predictor and the moving-average target this is BYOL.
        c.loss.family = LossFamily::InfoNce;
        c.optim.base_lr = 0.3;
        c.optim.weight_decay = 1e-6;
        c.optim.tau_base = 0.99;
        c.optim.total_steps = 5_000;
        c
    }

    /// Small batch with a slower target: the learning rate follows the batch
    /// scaling rule, τ_base 0.9995.
    pub fn small_batch() -> Self {
        let mut c = Self::full();
        c.preset = "small-batch".into();
        c.optim.batch_size = 32;
        c.optim.tau_base = 0.9995;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "ablation" => Ok(Self::ablation()),
            "small-batch" => Ok(Self::small_batch()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.optim.base_lr,
            batch_size: self.optim.batch_size * self.optim.accumulation,
            warmup_steps: self.optim.warmup_steps,
            total_steps: self.optim.total_steps,
            tau_base: self.optim.tau_base,
            tau_schedule: self.optim.tau_schedule,
        }
    }

    pub fn lars(&self) -> LarsConfig {
        LarsConfig {
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            trust_coefficient: self.optim.trust_coefficient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule().validate()?;
        self.aug_t.validate()?;
        self.aug_tp.validate()?;
        let s = self.model.input_size;
        if self.aug_t.target_size != (s, s) || self.aug_tp.target_size != (s, s) {
            return Err(Error::InvalidArgument("augmentation output must match model.input_size".into()));
        }
        if self.optim.batch_size < 2 {
            return Err(Error::InvalidArgument("optim.batch_size must be at least 2".into()));
        }
        if self.optim.accumulation == 0 {
            return Err(Error::InvalidArgument("optim.accumulation must be at least 1".into()));
        }
        if self.probe.learning_rates.is_empty() || !(0.0..1.0).contains(&self.probe.val_fraction) {
            return Err(Error::InvalidArgument("probe needs learning rates and val_fraction in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in serialization order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("preset", self.preset.clone());
        put("seed", self.seed.to_string());
        put("threads", self.threads.to_string());
        put("output_dir", self.output_dir.display().to_string());

        let d = &self.dataset;
        put("dataset.kind", d.kind.as_str().into());
        put("dataset.train_files", join(d.train_files.iter().map(|p| p.display())));
        put("dataset.test_files", join(d.test_files.iter().map(|p| p.display())));
        put("dataset.limit", d.limit.to_string());
        put("dataset.test_limit", d.test_limit.to_string());
        put("dataset.classes", d.classes.to_string());
        put("dataset.per_class", d.per_class.to_string());
        put("dataset.test_per_class", d.test_per_class.to_string());
        put("dataset.image_size", d.image_size.to_string());
        put("dataset.seed", d.seed.to_string());
        put("dataset.background", d.style.background.to_string());
        put("dataset.noise", d.style.noise.to_string());
        put("dataset.blob_radius", d.style.blob_radius.to_string());
        put("dataset.position_jitter", d.style.position_jitter.to_string());
        put("dataset.stripe_period", d.style.stripe_period.to_string());
        put("dataset.stripe_contrast", d.style.stripe_contrast.to_string());
        put("dataset.orientation_jitter", d.style.orientation_jitter.to_string());

        let m = &self.model;
        put("model.encoder", m.encoder.as_str().into());
        put("model.encoder_widths", join(m.encoder_widths.iter()));
        put("model.input_channels", m.input_channels.to_string());
        put("model.input_size", m.input_size.to_string());
        put("model.projector_hidden", m.projector_hidden.to_string());
        put("model.projection_dim", m.projection_dim.to_string());
        put("model.batch_norm", m.batch_norm.to_string());

        let l = &self.loss;
        put("loss.family", l.family.as_str().into());
        put("loss.temperature", l.temperature.to_string());
        put("loss.beta", l.beta.to_string());
        put("loss.use_predictor", l.use_predictor.to_string());
        put("loss.closed_form_predictor", l.closed_form_predictor.to_string());
        put("loss.target_mode", l.target_mode.as_str().into());
        put("loss.normalization", l.normalization.as_str().into());
        put("loss.scale", l.scale.to_string());

        let o = &self.optim;
        put("optim.base_lr", o.base_lr.to_string());
        put("optim.batch_size", o.batch_size.to_string());
        put("optim.accumulation", o.accumulation.to_string());
        put("optim.warmup_steps", o.warmup_steps.to_string());
        put("optim.total_steps", o.total_steps.to_string());
        put("optim.momentum", o.momentum.to_string());
        put("optim.weight_decay", o.weight_decay.to_string());
        put("optim.trust_coefficient", o.trust_coefficient.to_string());
        put("optim.tau_base", o.tau_base.to_string());
        put("optim.tau_schedule", o.tau_schedule.as_str().into());
        put("optim.predictor_lr_mult", o.predictor_lr_mult.to_string());
        put("optim.projector_lr_mult", o.projector_lr_mult.to_string());

        for (prefix, a) in [("aug.t", &self.aug_t), ("aug.tp", &self.aug_tp)] {
            for (name, value) in aug_entries(a) {
                put(&format!("{prefix}.{name}"), value);
            }
        }

        put("train.checkpoint_every", self.train.checkpoint_every.to_string());
        put("train.histogram_every", self.train.histogram_every.to_string());

        let p = &self.probe;
        put("probe.epochs", p.epochs.to_string());
        put("probe.batch_size", p.batch_size.to_string());
        put("probe.momentum", p.momentum.to_string());
        put("probe.learning_rates", join(p.learning_rates.iter()));
        put("probe.val_fraction", p.val_fraction.to_string());
        put("probe.augment_copies", p.augment_copies.to_string());
        put("probe.weight_decay", p.weight_decay.to_string());
        out
    }

    pub fn valid_keys() -> Vec<String> {
        Self::desk().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config { line: 0, message: format!("{key}: {v:?} is not {what}") };
        macro_rules! num {
            () => {
                parse_num(v).ok_or_else(|| bad("a number"))?
            };
        }
        macro_rules! flag {
            () => {
                match v {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad("true or false")),
                }
            };
        }
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = num!(),
            "threads" => self.threads = num!(),
            "output_dir" => self.output_dir = PathBuf::from(v),

            "dataset.kind" => self.dataset.kind = DatasetKind::parse(v).ok_or_else(|| bad("synth or cifar10"))?,
            "dataset.train_files" => self.dataset.train_files = split_list(v).map(PathBuf::from).collect(),
            "dataset.test_files" => self.dataset.test_files = split_list(v).map(PathBuf::from).collect(),
            "dataset.limit" => self.dataset.limit = num!(),
            "dataset.test_limit" => self.dataset.test_limit = num!(),
            "dataset.classes" => self.dataset.classes = num!(),
            "dataset.per_class" => self.dataset.per_class = num!(),
            "dataset.test_per_class" => self.dataset.test_per_class = num!(),
            "dataset.image_size" => self.dataset.image_size = num!(),
            "dataset.seed" => self.dataset.seed = num!(),
            "dataset.background" => self.dataset.style.background = num!(),
            "dataset.noise" => self.dataset.style.noise = num!(),
            "dataset.blob_radius" => self.dataset.style.blob_radius = num!(),
            "dataset.position_jitter" => self.dataset.style.position_jitter = num!(),
            "dataset.stripe_period" => self.dataset.style.stripe_period = num!(),
            "dataset.stripe_contrast" => self.dataset.style.stripe_contrast = num!(),
            "dataset.orientation_jitter" => self.dataset.style.orientation_jitter = num!(),

            "model.encoder" => {
                self.model.encoder = EncoderKind::parse(v).ok_or_else(|| bad("small_conv or mlp"))?
            }
            "model.encoder_widths" => {
                self.model.encoder_widths =
                    split_list(v).map(parse_num).collect::<Option<_>>().ok_or_else(|| bad("a list of widths"))?
            }
            "model.input_channels" => self.model.input_channels = num!(),
            "model.input_size" => {
                let s: usize = num!();
                self.model.input_size = s;
                self.aug_t.target_size = (s, s);
                self.aug_tp.target_size = (s, s);
            }
            "model.projector_hidden" => self.model.projector_hidden = num!(),
            "model.projection_dim" => self.model.projection_dim = num!(),
            "model.batch_norm" => self.model.batch_norm = flag!(),

            "loss.family" => self.loss.family = LossFamily::parse(v).ok_or_else(|| bad("byol or infonce"))?,
            "loss.temperature" => self.loss.temperature = num!(),
            "loss.beta" => self.loss.beta = num!(),
            "loss.use_predictor" => self.loss.use_predictor = flag!(),
            "loss.closed_form_predictor" => self.loss.closed_form_predictor = flag!(),
            "loss.target_mode" => {
                self.loss.target_mode = TargetMode::parse(v).ok_or_else(|| bad("theta, sg_theta or xi"))?
            }
            "loss.normalization" => {
                self.loss.normalization =
                    Normalization::parse(v).ok_or_else(|| bad("l2, layernorm, batchnorm or none"))?
            }
            "loss.scale" => self.loss.scale = num!(),

            "optim.base_lr" => self.optim.base_lr = num!(),
            "optim.batch_size" => self.optim.batch_size = num!(),
            "optim.accumulation" => self.optim.accumulation = num!(),
            "optim.warmup_steps" => self.optim.warmup_steps = num!(),
            "optim.total_steps" => self.optim.total_steps = num!(),
            "optim.momentum" => self.optim.momentum = num!(),
            "optim.weight_decay" => self.optim.weight_decay = num!(),
            "optim.trust_coefficient" => self.optim.trust_coefficient = num!(),
            "optim.tau_base" => self.optim.tau_base = num!(),
            "optim.tau_schedule" => {
                self.optim.tau_schedule = TauSchedule::parse(v).ok_or_else(|| bad("cosine or constant"))?
            }
            "optim.predictor_lr_mult" => self.optim.predictor_lr_mult = num!(),
            "optim.projector_lr_mult" => self.optim.projector_lr_mult = num!(),

            "train.checkpoint_every" => self.train.checkpoint_every = num!(),
            "train.histogram_every" => self.train.histogram_every = num!(),

            "probe.epochs" => self.probe.epochs = num!(),
            "probe.batch_size" => self.probe.batch_size = num!(),
            "probe.momentum" => self.probe.momentum = num!(),
            "probe.learning_rates" => {
                self.probe.learning_rates =
                    split_list(v).map(parse_num).collect::<Option<_>>().ok_or_else(|| bad("a list of numbers"))?
            }
            "probe.val_fraction" => self.probe.val_fraction = num!(),
            "probe.augment_copies" => self.probe.augment_copies = num!(),
            "probe.weight_decay" => self.probe.weight_decay = num!(),

            _ => {
                let aug = key
                    .strip_prefix("aug.tp.")
                    .map(|f| (&mut self.aug_tp, f))
                    .or_else(|| key.strip_prefix("aug.t.").map(|f| (&mut self.aug_t, f)));
                match aug {
                    Some((params, field)) if AUG_FIELDS.contains(&field) => {
                        set_aug(params, field, v).ok_or_else(|| bad("a number"))?
                    }
                    _ => return Err(Error::UnknownKey { key: key.to_string(), valid: Self::valid_keys() }),
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the `desk` preset. A `preset`
    /// line, when present, must come first and selects the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::desk();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Applies `key = value` lines in order. A leading `preset` line
    /// replaces the whole configuration with that preset first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut first = true;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if !first {
                    return Err(Error::Config { line: i + 1, message: "preset must be the first setting".into() });
                }
                *self = Self::preset(value).map_err(|e| Error::Config { line: i + 1, message: e.to_string() })?;
            }
            first = false;
            self.set(key, value).map_err(|e| match e {
                Error::Config { message, .. } => Error::Config { line: i + 1, message },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config { line: 0, message: format!("override {o:?} is not key=value") })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

const AUG_FIELDS: [&str; 17] = [
    "crop_prob",
    "flip_prob",
    "jitter_prob",
    "brightness",
    "contrast",
    "saturation",
    "hue",
    "grayscale_prob",
    "blur_prob",
    "solarize_prob",
    "area_min",
    "area_max",
    "aspect_min",
    "aspect_max",
    "blur_kernel_fraction",
    "sigma_min",
    "sigma_max",
];

fn aug_field<'a>(a: &'a mut AugmentationParams, field: &str) -> Option<&'a mut f32> {
    Some(match field {
        "crop_prob" => &mut a.crop_prob,
        "flip_prob" => &mut a.flip_prob,
        "jitter_prob" => &mut a.jitter_prob,
        "brightness" => &mut a.brightness_max,
        "contrast" => &mut a.contrast_max,
        "saturation" => &mut a.saturation_max,
        "hue" => &mut a.hue_max,
        "grayscale_prob" => &mut a.grayscale_prob,
        "blur_prob" => &mut a.blur_prob,
        "solarize_prob" => &mut a.solarize_prob,
        "area_min" => &mut a.area_range.0,
        "area_max" => &mut a.area_range.1,
        "aspect_min" => &mut a.aspect_ratio_range.0,
        "aspect_max" => &mut a.aspect_ratio_range.1,
        "blur_kernel_fraction" => &mut a.blur_kernel_fraction,
        "sigma_min" => &mut a.blur_sigma_range.0,
        "sigma_max" => &mut a.blur_sigma_range.1,
        _ => return None,
    })
}

fn set_aug(a: &mut AugmentationParams, field: &str, v: &str) -> Option<()> {
    let value = parse_num(v)?;
    *aug_field(a, field)? = value;
    Some(())
}

fn aug_entries(a: &AugmentationParams) -> Vec<(&'static str, String)> {
    let mut a = a.clone();
    AUG_FIELDS.iter().map(|&f| (f, aug_field(&mut a, f).expect("known field").to_string())).collect()
}

fn parse_num<T: FromStr>(s: &str) -> Option<T> {
    s.trim().parse().ok()
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
