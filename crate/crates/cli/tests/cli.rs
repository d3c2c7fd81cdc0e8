use std::path::Path;
use std::process::{Command, Output};

use byol_core::checkpoint::Checkpoint;
use byol_core::config::RunConfig;

fn byol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_byol")).args(args).output().expect("spawn byol")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cifar_file(path: &Path, records: usize) {
    let mut bytes = Vec::new();
    for r in 0..records {
        bytes.push((r % 10) as u8);
        bytes.extend((0..3072).map(|i| ((r * 31 + i * 7) % 256) as u8));
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn misspelled_key_fails_before_anything_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = byol(&["train", "--set", "loss.bta=1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("loss.bta"), "{err}");
    assert!(err.contains("loss.beta"), "valid keys are listed: {err}");
    assert!(!out.exists(), "no partial run directory");

    let o = byol(&["train", "--set", "loss.beta", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn ablation_preset_with_overrides_trains_the_simclr_wiring() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test, out) = (dir.path().join("train.bin"), dir.path().join("test.bin"), dir.path().join("run"));
    cifar_file(&train, 24);
    cifar_file(&test, 10);
    let train_files = format!("dataset.train_files={}", train.display());
    let test_files = format!("dataset.test_files={}", test.display());
    #[rustfmt::skip]
    let o = byol(&[
        "train", "--preset", "ablation",
        "--set", "loss.beta=1", "--set", "loss.use_predictor=false", "--set", "loss.target_mode=theta",
        "--set", &train_files, "--set", &test_files,
        "--set", "model.encoder_widths=4,8", "--set", "model.projector_hidden=16", "--set", "model.projection_dim=8",
        "--set", "optim.batch_size=8", "--set", "optim.total_steps=2", "--set", "optim.warmup_steps=0",
        "--set", "probe.epochs=1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("probe accuracy"));

    let ckpt = Checkpoint::load(out.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.step, 2);
    let c = RunConfig::parse(&ckpt.config).unwrap();
    assert_eq!(c.preset, "ablation");
    assert_eq!(c.loss.family.as_str(), "infonce");
    assert_eq!(c.loss.beta, 1.0);
    assert!(!c.loss.use_predictor);
    assert_eq!(c.loss.target_mode.as_str(), "theta");
    assert_eq!(c.loss.temperature, 0.1);
    assert_eq!((c.optim.base_lr, c.optim.weight_decay, c.optim.tau_base), (0.3, 1e-6, 0.99));
    for f in ["metrics.csv", "probe.txt", "collapse.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

/// Parameter totals worked out by hand from the layer shapes.
#[test]
fn fresh_checkpoint_parameter_count_matches_the_arithmetic() {
    // Desk MLP: 3·16·16 = 768 inputs, widths 128, 32, head 128 → 32, no BN.
    let encoder = (768 * 128 + 128) + (128 * 32 + 32);
    let head = |inputs: usize| (inputs * 128 + 128) + (128 * 32 + 32);
    let desk = encoder + head(32) + head(32);
    assert_eq!(desk, 119_264);
    // With BN: scale and shift on every hidden layer.
    let desk_bn = desk + 2 * (128 + 32) + 2 * 128 + 2 * 128;
    // Full preset conv: bias-free 3×3 convolutions 3→32→64→128→128 with BN,
    // head 512 → 64 with BN.
    let conv = 9 * (3 * 32 + 32 * 64 + 64 * 128 + 128 * 128) + 2 * (32 + 64 + 128 + 128);
    let conv_head = |inputs: usize| (inputs * 512 + 512) + 2 * 512 + (512 * 64 + 64);
    let full = conv + conv_head(128) + conv_head(64);
    assert_eq!(full, 408_224);

    let dir = tempfile::tempdir().unwrap();
    for (args, expected) in [
        (vec![], desk),
        (vec!["--set", "model.batch_norm=true"], desk_bn),
        (vec!["--preset", "full"], full),
    ] {
        let path = dir.path().join("init.ckpt");
        let mut argv = vec!["inspect-checkpoint", path.to_str().unwrap(), "--init"];
        argv.extend(args.iter().copied());
        let o = byol(&argv);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        let text = stdout(&o);
        assert!(text.contains(&format!("online parameters: {expected}\n")), "{args:?}: {text}");
        assert!(text.contains(&format!("architecture parameter count: {expected}\n")));
        assert!(text.starts_with("step 0\n"));

        // Reading the written file back gives the same report.
        let again = byol(&["inspect-checkpoint", path.to_str().unwrap()]);
        assert!(again.status.success());
        assert_eq!(stdout(&again), text);
    }
}

#[test]
fn augment_preview_writes_three_images_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preview");
    let o = byol(&["augment-preview", "--count", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..2 {
        for kind in ["original", "t", "tp"] {
            let bytes = std::fs::read(out.join(format!("{i:03}-{kind}.ppm"))).unwrap();
            assert!(bytes.starts_with(b"P6\n"));
        }
    }
}

#[test]
fn grid_file_with_a_bad_axis_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "wide: model.encoder_widths=256,64\n").unwrap();
    let o = byol(&["grid", "--grid", grid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn small_grid_prints_a_ranked_table() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "byol: loss.beta=0\nsimclr: loss.family=infonce loss.beta=1 loss.use_predictor=false loss.target_mode=theta\n").unwrap();
    let out = dir.path().join("grid-out");
    #[rustfmt::skip]
    let o = byol(&[
        "grid", "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--set", "dataset.per_class=8", "--set", "dataset.test_per_class=8", "--set", "optim.total_steps=3",
        "--set", "optim.warmup_steps=0", "--set", "optim.batch_size=8", "--set", "probe.epochs=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("name"));
    assert_eq!(table.lines().count(), 4);
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(out.join("results.txt")).unwrap(), table);
}
