//! The training loop: two augmented views per image, symmetrized loss,
//! one optimizer update on θ, then one moving-average update of ξ.
//!
//! Sample order and augmentations are pure functions of the seed and the
//! position in the sample stream, so a run split into sub-batches, resumed
//! from a checkpoint, or repeated gives the same images and views.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byol_tensor::{BnMode, NodeId, Tape, Tensor};
use rand::seq::SliceRandom;

use crate::augment::{apply_pipeline, ChannelNorm};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Image, ImageSet};
use crate::error::{Error, Result};
use crate::model::{NetworkPair, Subnet, TargetMode};
use crate::objective::{closed_form_predictor, row_cosines, symmetrized_loss};
use crate::optim::{group_multipliers, param_groups, Lars, ParamGroup, Schedule};
use crate::rng::RngStream;

pub const METRICS_HEADER: &str = "step,loss,cos_sim,z_norm_mean,zp_norm_mean,tau,lr";
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Number of completed updates, this one included.
    pub step: u64,
    pub loss: f64,
    /// Mean cosine between online outputs and their targets.
    pub cos_sim: f64,
    /// Mean norm of the online projections.
    pub z_norm_mean: f64,
    /// Mean norm of the target projections.
    pub zp_norm_mean: f64,
    pub tau: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss, self.cos_sim, self.z_norm_mean, self.zp_norm_mean, self.tau, self.lr
        )
    }
}

/// Everything a resumed run needs besides the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub pair: NetworkPair,
    pub optimizer: Lars,
    pub groups: Vec<ParamGroup>,
    /// Completed optimizer updates.
    pub step: u64,
    /// Completed moving-average updates.
    pub ema_updates: u64,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let pair = NetworkPair::new(config.model.clone(), config.seed)?;
        let mut groups = param_groups(&pair.online);
        group_multipliers(&mut groups, config.optim.predictor_lr_mult, config.optim.projector_lr_mult)?;
        let optimizer = Lars::new(config.lars(), &pair.online);
        Ok(Self { pair, optimizer, groups, step: 0, ema_updates: 0 })
    }

    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        let mut arrays = self.pair.export();
        for (p, b) in self.pair.online.iter().zip(&self.optimizer.buffers) {
            arrays.push((format!("momentum/{}", p.name), b.clone()));
        }
        Checkpoint { step: self.step, config: config.to_text(), arrays }
    }

    pub fn from_checkpoint(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(config)?;
        state.pair.import(ckpt)?;
        for (p, b) in state.pair.online.iter().zip(&mut state.optimizer.buffers) {
            let saved = ckpt.require(&format!("momentum/{}", p.name))?;
            if saved.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("momentum/{}: shape {:?}", p.name, saved.shape())));
            }
            *b = saved.clone();
        }
        state.step = ckpt.step;
        state.ema_updates = ckpt.step;
        Ok(state)
    }

    /// The kept artifact: online encoder parameters and statistics only.
    pub fn encoder_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        let arrays = self
            .pair
            .export()
            .into_iter()
            .filter(|(name, _)| {
                name.starts_with(&format!("online/{}.", Subnet::Encoder))
                    || (name.starts_with("online_bn/") && self.is_encoder_stat(name))
            })
            .collect();
        Checkpoint { step: self.step, config: config.to_text(), arrays }
    }

    fn is_encoder_stat(&self, name: &str) -> bool {
        let encoder_bn = self
            .pair
            .layers(Subnet::Encoder)
            .iter()
            .filter(|l| matches!(l, crate::model::Layer::BatchNorm { .. }))
            .count();
        let index = name.split('/').nth(1).and_then(|i| i.parse::<usize>().ok());
        index.is_some_and(|i| i < encoder_bn)
    }
}

/// Gradients and diagnostics from one sub-batch.
struct SubBatch {
    grads: Vec<Tensor>,
    loss: f64,
    cos_sim: f64,
    z_norm_mean: f64,
    zp_norm_mean: f64,
    z_norms: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let (n, _) = t.dims2().expect("matrix");
    (0..n).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Stacks images into an `(N, C, H, W)` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Shape("images in a batch differ in shape".into()));
        }
        data.extend(img.pixels.iter().map(|&v| v as f64));
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

/// Per-channel normalization from training-set statistics; the std is
/// floored for constant channels.
pub fn dataset_norm(data: &ImageSet) -> ChannelNorm {
    let (mean, std) = data.channel_stats();
    ChannelNorm { mean, std: std.into_iter().map(|s| s.max(1e-3)).collect() }
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub state: TrainState,
    data: &'a ImageSet,
    norm: ChannelNorm,
    schedule: Schedule,
    order: Option<(u64, Vec<usize>)>,
    /// Steps after which the absence of target gradients was verified.
    pub target_grad_checks: u64,
    /// Per-sample online projection norms from the most recent update.
    pub last_z_norms: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a ImageSet) -> Result<Self> {
        let state = TrainState::new(&config)?;
        Self::with_state(config, data, state)
    }

    pub fn resume(config: RunConfig, data: &'a ImageSet, ckpt: &Checkpoint) -> Result<Self> {
        let state = TrainState::from_checkpoint(&config, ckpt)?;
        Self::with_state(config, data, state)
    }

    pub fn with_state(config: RunConfig, data: &'a ImageSet, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if data.channels != config.model.input_channels {
            return Err(Error::Shape(format!(
                "dataset has {} channels, model expects {}",
                data.channels, config.model.input_channels
            )));
        }
        let norm = dataset_norm(data);
        let schedule = config.schedule();
        Ok(Self {
            config,
            state,
            data,
            norm,
            schedule,
            order: None,
            target_grad_checks: 0,
            last_z_norms: Vec::new(),
        })
    }

    pub fn norm(&self) -> &ChannelNorm {
        &self.norm
    }

    /// Dataset index of the `position`-th sample in the stream, with its
    /// epoch. Each epoch is a fresh seeded permutation.
    fn sample(&mut self, position: u64) -> (u64, usize) {
        let n = self.data.len() as u64;
        let epoch = position / n;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            perm.shuffle(&mut RngStream::new(self.config.seed).split(0x5eed).split(epoch).rng());
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().expect("just filled").1;
        (epoch, perm[(position % n) as usize])
    }

    /// Both augmented views of the samples at the given stream positions.
    fn views(&mut self, positions: std::ops::Range<u64>) -> Result<(Tensor, Tensor)> {
        let root = RngStream::new(self.config.seed).split(0xa06);
        let mut v1 = Vec::new();
        let mut v2 = Vec::new();
        for p in positions {
            let (epoch, idx) = self.sample(p);
            let img = self.data.image(idx);
            let stream = root.split(epoch).split(idx as u64);
            v1.push(apply_pipeline(&img, &self.config.aug_t, &self.norm, stream.split(0)));
            v2.push(apply_pipeline(&img, &self.config.aug_tp, &self.norm, stream.split(1)));
        }
        Ok((images_to_tensor(&v1)?, images_to_tensor(&v2)?))
    }

    fn sub_batch(&mut self, x1: Tensor, x2: Tensor) -> Result<SubBatch> {
        let spec = self.config.loss.clone();
        let pair = &mut self.state.pair;
        let mut tape = Tape::new();
        let params = pair.register_online(&mut tape);
        let target_params = match spec.target_mode {
            TargetMode::MovingAverage => pair.register_target(&mut tape),
            _ => Vec::new(),
        };
        let xs = [tape.constant(x1), tape.constant(x2)];
        let with_predictor = spec.predictor_network();
        let mut online = Vec::with_capacity(2);
        for &x in &xs {
            online.push(pair.forward_online(&mut tape, &params, x, BnMode::Train, with_predictor)?);
        }
        let mut psi = [xs[0]; 2];
        for k in 0..2 {
            psi[k] = pair.target_view(spec.target_mode, &mut tape, &target_params, xs[k], online[k].projection)?;
        }
        let z = [online[0].projection, online[1].projection];
        let phi: [NodeId; 2] = if spec.closed_form_predictor && spec.use_predictor {
            // One least-squares map for both directions: z1 → ψ2 and z2 → ψ1.
            let stack = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
                let (n, f) = a.dims2()?;
                let mut d = a.data().to_vec();
                d.extend_from_slice(b.data());
                Ok(Tensor::new(&[2 * n, f], d)?)
            };
            let zs = stack(tape.value(z[0])?, tape.value(z[1])?)?;
            let ts = stack(tape.value(psi[1])?, tape.value(psi[0])?)?;
            let q = tape.constant(closed_form_predictor(&zs, &ts)?);
            [tape.matmul(z[0], q)?, tape.matmul(z[1], q)?]
        } else if with_predictor {
            [online[0].prediction.expect("predictor ran"), online[1].prediction.expect("predictor ran")]
        } else {
            z
        };

        let loss = symmetrized_loss(&mut tape, &spec, phi, psi)?;
        let loss_value = tape.value(loss)?.item()?;
        let mut cos = row_cosines(tape.value(phi[0])?, tape.value(psi[1])?);
        cos.extend(row_cosines(tape.value(phi[1])?, tape.value(psi[0])?));
        let mut z_norms = row_norms(tape.value(z[0])?);
        z_norms.extend(row_norms(tape.value(z[1])?));
        let mut zp_norms = row_norms(tape.value(psi[0])?);
        zp_norms.extend(row_norms(tape.value(psi[1])?));

        let mut grads = tape.backward(loss)?;
        if let Some(i) = target_params.iter().position(|&t| grads.get(t).is_some()) {
            return Err(Error::InvalidArgument(format!(
                "gradient reached target parameter {}",
                pair.target[i].name
            )));
        }
        let grads = params
            .iter()
            .zip(&pair.online)
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        Ok(SubBatch {
            grads,
            loss: loss_value,
            cos_sim: mean(&cos),
            z_norm_mean: mean(&z_norms),
            zp_norm_mean: mean(&zp_norms),
            z_norms,
        })
    }

    fn diverged(&self, step: u64) -> Error {
        let norms = self
            .state
            .pair
            .online
            .iter()
            .map(|p| format!("{}={:.3e}", p.name, p.value.norm()))
            .collect::<Vec<_>>()
            .join(" ");
        Error::Diverged { step, norms }
    }

    /// One update: gradients averaged over `accumulation` consecutive
    /// sub-batches, one optimizer step, one moving-average step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let k = self.state.step;
        if k >= self.schedule.total_steps {
            return Err(Error::InvalidArgument(format!("run already finished {k} steps")));
        }
        let b = self.config.optim.batch_size as u64;
        let n = self.config.optim.accumulation as u64;
        let mut parts = Vec::with_capacity(n as usize);
        for s in 0..n {
            let start = (k * n + s) * b;
            let (x1, x2) = self.views(start..start + b)?;
            let part = self.sub_batch(x1, x2)?;
            if !part.loss.is_finite() {
                return Err(self.diverged(k + 1));
            }
            parts.push(part);
        }
        let mut grads = std::mem::take(&mut parts[0].grads);
        for part in &parts[1..] {
            for (g, h) in grads.iter_mut().zip(&part.grads) {
                g.axpy(1.0, h);
            }
        }
        if n > 1 {
            grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n as f64));
        }
        let lr = self.schedule.lr_at(k + 1)?;
        let tau = self.schedule.tau_at(k + 1)?;
        let state = &mut self.state;
        state.optimizer.step(&mut state.pair.online, &state.groups, &grads, lr)?;
        state.pair.ema_update(tau)?;
        state.step += 1;
        state.ema_updates += 1;
        self.target_grad_checks += 1;

        let avg = |f: fn(&SubBatch) -> f64| parts.iter().map(f).sum::<f64>() / n as f64;
        self.last_z_norms = parts.iter().flat_map(|p| p.z_norms.iter().copied()).collect();
        Ok(StepMetrics {
            step: state.step,
            loss: avg(|p| p.loss),
            cos_sim: avg(|p| p.cos_sim),
            z_norm_mean: avg(|p| p.z_norm_mean),
            zp_norm_mean: avg(|p| p.zp_norm_mean),
            tau,
            lr,
        })
    }

    /// Runs updates until `stop` (capped at the configured total).
    pub fn run_until(&mut self, stop: u64, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        let stop = stop.min(self.schedule.total_steps);
        while self.state.step < stop {
            let m = self.step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub histograms: PathBuf,
    pub final_checkpoint: PathBuf,
    pub encoder: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            histograms: dir.join("norm_histograms.csv"),
            final_checkpoint: dir.join("final.ckpt"),
            encoder: dir.join("encoder.ckpt"),
        }
    }
}

fn csv_writer(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let fresh = !append || !path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Histogram of values over `HISTOGRAM_BINS` equal bins spanning their range.
pub fn histogram(values: &[f64]) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; HISTOGRAM_BINS];
    if values.is_empty() {
        return (0.0, 0.0, counts);
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &v in values {
        let bin = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    (lo, hi, counts)
}

/// Trains to the configured total, writing metrics, histograms, periodic
/// and final checkpoints, and the encoder artifact into `dir`. With
/// `resume`, training continues from that checkpoint and the CSV files are
/// appended to.
pub fn train(
    config: &RunConfig,
    data: &ImageSet,
    dir: &Path,
    resume: Option<&Checkpoint>,
    stop_at: Option<u64>,
) -> Result<(TrainState, Vec<StepMetrics>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunArtifacts::in_dir(dir);
    let mut trainer = match resume {
        Some(c) => Trainer::resume(config.clone(), data, c)?,
        None => Trainer::new(config.clone(), data)?,
    };
    std::fs::write(dir.join("config.txt"), config.to_text()).map_err(|e| Error::io(dir, e))?;
    let append = resume.is_some();
    let mut metrics_out = csv_writer(&files.metrics, METRICS_HEADER, append)?;
    let hist_header = format!(
        "step,min,max,{}",
        (0..HISTOGRAM_BINS).map(|i| format!("bin{i}")).collect::<Vec<_>>().join(",")
    );
    let mut hist_out = csv_writer(&files.histograms, &hist_header, append)?;
    let mut log = Vec::new();
    let stop = stop_at.unwrap_or(config.optim.total_steps);
    trainer.run_until(stop, |t, m| {
        writeln!(metrics_out, "{}", m.csv_row()).map_err(|e| Error::io(&files.metrics, e))?;
        let every = config.train.histogram_every;
        if every > 0 && m.step % every == 0 {
            let (lo, hi, counts) = histogram(&t.last_z_norms);
            let counts = counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            writeln!(hist_out, "{},{lo},{hi},{counts}", m.step).map_err(|e| Error::io(&files.histograms, e))?;
        }
        let every = config.train.checkpoint_every;
        if every > 0 && m.step % every == 0 {
            t.state.to_checkpoint(config).save(dir.join(format!("step-{:06}.ckpt", m.step)))?;
        }
        log.push(*m);
        Ok(())
    })?;
    metrics_out.flush().map_err(|e| Error::io(&files.metrics, e))?;
    hist_out.flush().map_err(|e| Error::io(&files.histograms, e))?;
    let state = trainer.state;
    state.to_checkpoint(config).save(&files.final_checkpoint)?;
    state.encoder_checkpoint(config).save(&files.encoder)?;
    Ok((state, log))
}
