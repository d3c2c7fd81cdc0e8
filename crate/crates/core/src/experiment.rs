//! One complete experiment: data, training, linear evaluation, diagnostics.

use std::path::Path;

use crate::augment::ChannelNorm;
use crate::config::{DatasetKind, RunConfig};
use crate::data::{load_cifar10_files, synth_clusters_with, ImageSet};
use crate::error::{Error, Result};
use crate::eval::{
    augmented_copies, collapse_metrics, eval_inputs, extract_projections, extract_representations, linear_probe,
    CollapseReport, ProbeResult,
};
use crate::model::NetworkPair;
use crate::trainer::{dataset_norm, train, Trainer};

/// Train and test images for a configuration.
pub fn load_datasets(config: &RunConfig) -> Result<(ImageSet, ImageSet)> {
    let d = &config.dataset;
    match d.kind {
        DatasetKind::Synth => {
            let train = synth_clusters_with(d.classes, d.per_class, d.image_size, d.seed, &d.style);
            let test = synth_clusters_with(d.classes, d.test_per_class, d.image_size, d.seed ^ 0x7e57, &d.style);
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            if d.train_files.is_empty() || d.test_files.is_empty() {
                return Err(Error::InvalidArgument(
                    "cifar10 needs dataset.train_files and dataset.test_files".into(),
                ));
            }
            let mut train = load_cifar10_files(&d.train_files)?;
            let mut test = load_cifar10_files(&d.test_files)?;
            if d.limit > 0 {
                train = train.truncated(d.limit);
            }
            if d.test_limit > 0 {
                test = test.truncated(d.test_limit);
            }
            Ok((train, test))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub probe: ProbeResult,
    pub collapse: CollapseReport,
}

/// Probes the online encoder and measures collapse of the online
/// projections on the test set. Neither parameters nor statistics change.
pub fn evaluate(
    pair: &NetworkPair,
    train_set: &ImageSet,
    test_set: &ImageSet,
    norm: &ChannelNorm,
    config: &RunConfig,
) -> Result<Evaluation> {
    let size = config.model.input_size;
    let mut train_images = eval_inputs(train_set, size, norm);
    let mut train_labels = train_set.labels.clone();
    let copies = config.probe.augment_copies;
    if copies > 0 {
        train_images.extend(augmented_copies(train_set, size, norm, copies, config.seed));
        for _ in 0..copies {
            train_labels.extend_from_slice(&train_set.labels);
        }
    }
    let test_images = eval_inputs(test_set, size, norm);
    let train_x = extract_representations(pair, &train_images)?;
    let test_x = extract_representations(pair, &test_images)?;
    let probe = linear_probe(&train_x, &train_labels, &test_x, &test_set.labels, &config.probe, config.seed)?;
    let collapse = collapse_metrics(&extract_projections(pair, &test_images)?)?;
    Ok(Evaluation { probe, collapse })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub evaluation: Evaluation,
    pub final_loss: Option<f64>,
    pub steps: u64,
}

/// Trains per `config` and evaluates the result. With `dir`, run artifacts
/// and `probe.txt` / `collapse.txt` records are written there.
pub fn run_experiment(
    config: &RunConfig,
    train_set: &ImageSet,
    test_set: &ImageSet,
    dir: Option<&Path>,
) -> Result<ExperimentResult> {
    let (state, log) = match dir {
        Some(dir) => train(config, train_set, dir, None, None)?,
        None => {
            let mut trainer = Trainer::new(config.clone(), train_set)?;
            let mut log = Vec::new();
            trainer.run_until(config.optim.total_steps, |_, m| {
                log.push(*m);
                Ok(())
            })?;
            (trainer.state, log)
        }
    };
    let norm = dataset_norm(train_set);
    let evaluation = evaluate(&state.pair, train_set, test_set, &norm, config)?;
    if let Some(dir) = dir {
        write_records(dir, &evaluation)?;
    }
    Ok(ExperimentResult { evaluation, final_loss: log.last().map(|m| m.loss), steps: state.step })
}

pub fn write_records(dir: &Path, e: &Evaluation) -> Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let probe = format!(
        "accuracy = {}\nbest_lr = {}\nval_accuracy = {}\nper_class = {}\ncurve = {}\n",
        e.probe.accuracy,
        e.probe.best_lr,
        e.probe.val_accuracy,
        join(&e.probe.per_class),
        join(&e.probe.curve)
    );
    let collapse = format!(
        "mean_std = {}\nmean_norm = {}\neffective_rank = {}\nper_dim_std = {}\n",
        e.collapse.mean_std,
        e.collapse.mean_norm,
        e.collapse.effective_rank,
        join(&e.collapse.per_dim_std)
    );
    for (name, text) in [("probe.txt", probe), ("collapse.txt", collapse)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
