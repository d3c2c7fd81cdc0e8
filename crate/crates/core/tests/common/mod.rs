#![allow(dead_code)]

use byol_core::config::RunConfig;
use byol_core::data::{synth_clusters, ImageSet};

/// A configuration small enough for many short runs per test.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    for (k, v) in [
        ("dataset.classes", "2"),
        ("dataset.per_class", "16"),
        ("dataset.image_size", "10"),
        ("model.input_size", "8"),
        ("model.encoder_widths", "16,8"),
        ("model.projector_hidden", "16"),
        ("model.projection_dim", "8"),
        ("optim.batch_size", "8"),
        ("optim.warmup_steps", "0"),
        ("optim.total_steps", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

pub fn tiny_data(config: &RunConfig) -> ImageSet {
    let d = &config.dataset;
    synth_clusters(d.classes, d.per_class, d.image_size, d.seed)
}

pub fn set(config: &mut RunConfig, pairs: &[(&str, &str)]) {
    for (k, v) in pairs {
        config.set(k, v).unwrap();
    }
}
