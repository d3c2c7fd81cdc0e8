//! Linear evaluation on frozen representations and collapse diagnostics.

use byol_tensor::{Tape, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::augment::{apply_pipeline, eval_transform, AugmentationParams, ChannelNorm};
use crate::config::ProbeSpec;
use crate::data::{Image, ImageSet};
use crate::error::{Error, Result};
use crate::model::NetworkPair;
use crate::optim::Nesterov;
use crate::rng::RngStream;
use crate::trainer::images_to_tensor;

/// Images per forward pass during feature extraction.
pub const EXTRACT_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Top-1 test accuracy of the classifier trained with `best_lr`.
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub best_lr: f64,
    pub val_accuracy: f64,
    /// Mean training loss per epoch of the final classifier.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    /// Standard deviation of each coordinate of the l2-normalized rows.
    pub per_dim_std: Vec<f64>,
    pub mean_std: f64,
    /// Mean l2 norm of the raw rows.
    pub mean_norm: f64,
    pub effective_rank: f64,
}

impl CollapseReport {
    pub fn collapsed(&self, threshold: f64) -> bool {
        self.mean_std < threshold
    }
}

/// Mean per-dimension std below which projections count as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.01;

fn run_batched(images: &[Image], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in images.chunks(EXTRACT_BATCH) {
        let out = f(&images_to_tensor(chunk)?)?;
        width = out.dims2()?.1;
        data.extend_from_slice(out.data());
    }
    Ok(Tensor::new(&[images.len(), width], data)?)
}

/// Deterministic eval-mode inputs for every image of `set`.
pub fn eval_inputs(set: &ImageSet, size: usize, norm: &ChannelNorm) -> Vec<Image> {
    (0..set.len()).map(|i| eval_transform(&set.image(i), (size, size), norm)).collect()
}

/// Representations `f_θ(x)` in eval mode, one row per image.
pub fn extract_representations(pair: &NetworkPair, images: &[Image]) -> Result<Tensor> {
    run_batched(images, |x| pair.represent(x))
}

/// Online projections `g_θ(f_θ(x))` in eval mode.
pub fn extract_projections(pair: &NetworkPair, images: &[Image]) -> Result<Tensor> {
    run_batched(images, |x| pair.project(x))
}

/// Crop-and-flip copies of every image for probe training.
pub fn augmented_copies(set: &ImageSet, size: usize, norm: &ChannelNorm, copies: usize, seed: u64) -> Vec<Image> {
    let params = AugmentationParams::crop_and_flip(size);
    let root = RngStream::new(seed).split(0x9e0b);
    (0..copies)
        .flat_map(|c| (0..set.len()).map(move |i| (c, i)))
        .map(|(c, i)| apply_pipeline(&set.image(i), &params, norm, root.split(c as u64).split(i as u64)))
        .collect()
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let (_, f) = x.dims2().expect("matrix");
    let mut data = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(&[rows.len(), f], data).expect("shape")
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn logits(&self, x: &Tensor) -> Tensor {
        let mut out = x.matmul(&self.w).expect("shape");
        let c = self.b.numel();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.b.data()[i % c];
        }
        out
    }

    fn predict(&self, x: &Tensor) -> Vec<usize> {
        let logits = self.logits(x);
        let (n, _) = logits.dims2().expect("matrix");
        (0..n)
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn train_linear(
    x: &Tensor,
    y: &[usize],
    classes: usize,
    lr: f64,
    spec: &ProbeSpec,
    seed: u64,
) -> Result<(Linear, Vec<f64>)> {
    let (n, f) = x.dims2()?;
    let mut params = vec![Tensor::zeros(&[f, classes]), Tensor::zeros(&[classes])];
    let mut opt = Nesterov::new(spec.momentum, &params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed).split(0x11).rng();
    let batch = spec.batch_size.max(1);
    let mut curve = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(batch) {
            let mut tape = Tape::new();
            let w = tape.param(params[0].clone());
            let b = tape.param(params[1].clone());
            let xb = tape.constant(gather(x, rows));
            let labels: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
            let logits = tape.matmul(xb, w)?;
            let logits = tape.add_bias(logits, b)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            total += tape.value(loss)?.item()? * rows.len() as f64;
            let mut g = tape.backward(loss)?;
            let mut gw = g.take(w).expect("weight gradient");
            if spec.weight_decay > 0.0 {
                gw.axpy(spec.weight_decay, &params[0]);
            }
            let gb = g.take(b).expect("bias gradient");
            opt.step(&mut params, &[gw, gb], lr)?;
        }
        curve.push(total / n as f64);
    }
    let b = params.pop().expect("bias");
    let w = params.pop().expect("weight");
    Ok((Linear { w, b }, curve))
}

/// Root mean square of all entries; features are divided by it so a single
/// learning-rate grid fits every encoder.
pub fn feature_scale(x: &Tensor) -> f64 {
    let rms = (x.data().iter().map(|v| v * v).sum::<f64>() / x.numel().max(1) as f64).sqrt();
    if rms > 0.0 {
        rms
    } else {
        1.0
    }
}

/// Trains a softmax classifier on frozen features with Nesterov SGD. The
/// learning rate is chosen on a held-out slice of the training set; the
/// classifier is then retrained on all training features and scored on the
/// test features.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    spec: &ProbeSpec,
    seed: u64,
) -> Result<ProbeResult> {
    let (n, f) = train_x.dims2()?;
    if train_y.len() != n || test_x.dims2()?.0 != test_y.len() || test_x.dims2()?.1 != f {
        return Err(Error::Shape("probe features and labels disagree".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |&m| m + 1);
    let mut seen = vec![false; classes];
    train_y.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least two classes".into()));
    }
    let scale = 1.0 / feature_scale(train_x);
    let train_x = train_x.map(|v| v * scale);
    let test_x = test_x.map(|v| v * scale);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(seed).split(0x5a1).rng());
    let n_val = ((n as f64) * spec.val_fraction).round() as usize;
    let (val_rows, fit_rows) = if n_val > 0 && n_val < n { order.split_at(n_val) } else { (&order[..], &order[..]) };
    let fit_x = gather(&train_x, fit_rows);
    let fit_y: Vec<usize> = fit_rows.iter().map(|&r| train_y[r]).collect();
    let val_x = gather(&train_x, val_rows);
    let val_y: Vec<usize> = val_rows.iter().map(|&r| train_y[r]).collect();

    let mut best = (f64::NEG_INFINITY, spec.learning_rates[0]);
    for &lr in &spec.learning_rates {
        let (model, _) = train_linear(&fit_x, &fit_y, classes, lr, spec, seed)?;
        let acc = accuracy(&model.predict(&val_x), &val_y);
        if acc > best.0 {
            best = (acc, lr);
        }
    }
    let (model, curve) = train_linear(&train_x, train_y, classes, best.1, spec, seed)?;
    let pred = model.predict(&test_x);
    let per_class = (0..classes)
        .map(|c| {
            let idx: Vec<usize> = (0..test_y.len()).filter(|&i| test_y[i] == c).collect();
            let hits = idx.iter().filter(|&&i| pred[i] == c).count();
            if idx.is_empty() {
                0.0
            } else {
                hits as f64 / idx.len() as f64
            }
        })
        .collect();
    Ok(ProbeResult { accuracy: accuracy(&pred, test_y), per_class, best_lr: best.1, val_accuracy: best.0, curve })
}

/// Per-dimension spread of the l2-normalized rows, mean raw norm, and the
/// effective rank `exp(H(σ²/Σσ²))` of the row matrix.
pub fn collapse_metrics(x: &Tensor) -> Result<CollapseReport> {
    let (n, p) = x.dims2()?;
    if n < 2 {
        return Err(Error::InvalidArgument("collapse metrics need at least two samples".into()));
    }
    let norms: Vec<f64> = (0..n).map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mean_norm = norms.iter().sum::<f64>() / n as f64;
    let mut per_dim_std = vec![0.0; p];
    for (j, s) in per_dim_std.iter_mut().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| x.row(i)[j] / norms[i].max(byol_tensor::NORM_EPS)).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        *s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    let mean_std = per_dim_std.iter().sum::<f64>() / p as f64;

    let m = DMatrix::from_row_slice(n, p, x.data());
    let eig = SymmetricEigen::new(m.transpose() * &m).eigenvalues;
    let total: f64 = eig.iter().map(|&e| e.max(0.0)).sum();
    let effective_rank = if total > 0.0 {
        let h: f64 = eig
            .iter()
            .map(|&e| e.max(0.0) / total)
            .filter(|&q| q > 0.0)
            .map(|q| -q * q.ln())
            .sum();
        h.exp()
    } else {
        0.0
    };
    Ok(CollapseReport { per_dim_std, mean_std, mean_norm, effective_rank })
}
