use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use byol_core::augment::augment_unnormalized;
use byol_core::checkpoint::Checkpoint;
use byol_core::config::RunConfig;
use byol_core::data::Image;
use byol_core::experiment::{evaluate, load_datasets, write_records};
use byol_core::grid::{run_grid, to_csv, to_text, AblationGrid};
use byol_core::model::{NetworkPair, Subnet};
use byol_core::rng::RngStream;
use byol_core::trainer::{dataset_norm, train, TrainState};
use clap::{Args, Parser, Subcommand};

/// Bootstrap-latent self-supervised training, evaluation and ablations.
#[derive(Parser)]
#[command(name = "byol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk, full, ablation or small-batch.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set loss.beta=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, then run the linear probe on the result.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Skip the linear probe.
        #[arg(long)]
        no_eval: bool,
    },
    /// Linear probe and collapse diagnostics for a saved checkpoint.
    Probe {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and print the ranked table.
    Grid {
        /// Grid file of `name: key=value ...` lines; defaults to the eight
        /// predictor / target / β variants.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the contents and parameter counts of a checkpoint.
    InspectCheckpoint {
        checkpoint: PathBuf,
        /// Write a freshly initialized checkpoint for the configuration to
        /// this path instead of reading one.
        #[arg(long)]
        init: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write original images and two augmented views as PPM files.
    AugmentPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value = "augment-preview")]
        out: PathBuf,
    },
}

/// Failures in resolving the configuration exit with this code.
const CONFIG_EXIT: u8 = 2;

fn resolve(args: &ConfigArgs, base: Option<&str>) -> byol_core::Result<RunConfig> {
    let mut c = match &args.preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::desk(),
    };
    if let Some(text) = base {
        c.apply_text(text)?;
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| byol_core::Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        c.apply_text(&text)?;
    }
    c.apply_overrides(&args.overrides)?;
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(t) = args.threads {
        c.threads = t;
    }
    c.validate()?;
    Ok(c)
}

struct ConfigError(byol_core::Error);

fn config_or_exit(args: &ConfigArgs, base: Option<&str>) -> Result<RunConfig, ConfigError> {
    resolve(args, base).map_err(ConfigError)
}

fn write_ppm(path: &Path, img: &Image) -> anyhow::Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let v = img.at(c.min(img.channels - 1), y, x);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(e: &byol_core::experiment::Evaluation) {
    println!(
        "probe accuracy {:.2}%  (lr {}, val {:.2}%)",
        100.0 * e.probe.accuracy,
        e.probe.best_lr,
        100.0 * e.probe.val_accuracy
    );
    println!(
        "projection mean per-dim std {:.4}  mean norm {:.4}  effective rank {:.2}",
        e.collapse.mean_std, e.collapse.mean_norm, e.collapse.effective_rank
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, out, resume, stop_at, no_eval } => {
            let config = config_or_exit(&cfg, None)?;
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            let ckpt = resume.as_ref().map(Checkpoint::load).transpose()?;
            let (train_set, test_set) = load_datasets(&config)?;
            let (state, log) = train(&config, &train_set, &dir, ckpt.as_ref(), stop_at)?;
            if let Some(m) = log.last() {
                println!("step {}  loss {:.5}  cos {:.4}  tau {:.5}  lr {:.5}", m.step, m.loss, m.cos_sim, m.tau, m.lr);
            }
            println!("artifacts in {}", dir.display());
            if !no_eval {
                let e = evaluate(&state.pair, &train_set, &test_set, &dataset_norm(&train_set), &config)?;
                write_records(&dir, &e)?;
                print_summary(&e);
            }
        }
        Command::Probe { checkpoint, cfg, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = config_or_exit(&cfg, Some(&ckpt.config))?;
            let mut pair = NetworkPair::new(config.model.clone(), config.seed)?;
            pair.import(&ckpt)?;
            let (train_set, test_set) = load_datasets(&config)?;
            let e = evaluate(&pair, &train_set, &test_set, &dataset_norm(&train_set), &config)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
                write_records(&dir, &e)?;
            }
            print_summary(&e);
        }
        Command::Grid { grid, cfg, out } => {
            let config = config_or_exit(&cfg, None)?;
            let grid = match grid {
                Some(path) => AblationGrid::parse(
                    &std::fs::read_to_string(&path).with_context(|| path.display().to_string())?,
                )
                .map_err(ConfigError)?,
                None => AblationGrid::byol_to_simclr(),
            };
            for (name, c) in grid.configs(&config) {
                if let Err(e) = c {
                    return Err(ConfigError(byol_core::Error::InvalidArgument(format!("row {name}: {e}"))).into());
                }
            }
            let (train_set, test_set) = load_datasets(&config)?;
            let results = run_grid(&config, &grid, &train_set, &test_set, out.as_deref(), config.threads);
            let table = to_text(&results);
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
                std::fs::write(dir.join("results.csv"), to_csv(&results)).context("results.csv")?;
                std::fs::write(dir.join("results.txt"), table).context("results.txt")?;
            }
        }
        Command::InspectCheckpoint { checkpoint, init, cfg } => {
            let ckpt = if init {
                let config = config_or_exit(&cfg, None)?;
                let c = TrainState::new(&config)?.to_checkpoint(&config);
                c.save(&checkpoint)?;
                c
            } else {
                Checkpoint::load(&checkpoint)?
            };
            inspect(&ckpt)?;
        }
        Command::AugmentPreview { cfg, count, out } => {
            let config = config_or_exit(&cfg, None)?;
            let (train_set, _) = load_datasets(&config)?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let root = RngStream::new(config.seed);
            for i in 0..count.min(train_set.len()) {
                let img = train_set.image(i);
                let s = root.split(i as u64);
                write_ppm(&out.join(format!("{i:03}-original.ppm")), &img)?;
                write_ppm(&out.join(format!("{i:03}-t.ppm")), &augment_unnormalized(&img, &config.aug_t, s.split(0)))?;
                write_ppm(&out.join(format!("{i:03}-tp.ppm")), &augment_unnormalized(&img, &config.aug_tp, s.split(1)))?;
            }
            println!("wrote {} previews to {}", count.min(train_set.len()), out.display());
        }
    }
    Ok(())
}

fn inspect(ckpt: &Checkpoint) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "step {}", ckpt.step)?;
    let mut by_group: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in &ckpt.arrays {
        writeln!(out, "  {name:<40} {:?}", t.shape())?;
        let group = match name.split_once('/') {
            Some(("online", rest)) => format!("online {}", rest.split('.').next().unwrap_or("")),
            Some((prefix, _)) => prefix.to_string(),
            None => name.clone(),
        };
        *by_group.entry(group).or_default() += t.numel();
    }
    for (g, n) in &by_group {
        writeln!(out, "{g}: {n} values")?;
    }
    let online: usize = by_group.iter().filter(|(g, _)| g.starts_with("online ")).map(|(_, n)| n).sum();
    writeln!(out, "online parameters: {online}")?;
    if let Ok(config) = RunConfig::parse(&ckpt.config) {
        let arch = &config.model;
        let expected: usize = [Subnet::Encoder, Subnet::Projector, Subnet::Predictor]
            .iter()
            .map(|&s| arch.parameter_count(s))
            .sum();
        writeln!(out, "architecture parameter count: {expected}")?;
        if expected != online {
            bail!("checkpoint holds {online} online parameters, architecture implies {expected}");
        }
    }
    Ok(())
}

enum Failure {
    Config(byol_core::Error),
    Run(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<byol_core::Error> for Failure {
    fn from(e: byol_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_EXIT)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
