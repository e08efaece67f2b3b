use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use riemannformer::attention::LfConfig;
use riemannformer::config::apply_config;
use riemannformer::data::{load_cifar, CifarKind, Dataset};
use riemannformer::presets::{position_data, position_model, position_training, trend_model};
use riemannformer::training::{train, TrainConfig, TrainOutput};
use riemannformer::{Mechanism, ViTConfig, Vit};

use crate::{parse_mechanism, Verdict};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    Cifar10,
    Cifar100,
    /// The marker-position task: find the one marker token among fillers.
    Synthetic,
}

impl DatasetName {
    pub fn cifar_kind(self) -> Option<CifarKind> {
        match self {
            DatasetName::Cifar10 => Some(CifarKind::Cifar10),
            DatasetName::Cifar100 => Some(CifarKind::Cifar100),
            DatasetName::Synthetic => None,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// `key=value` file with model and training settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the CIFAR binary archives.
    #[arg(long, env = "RIEMANNFORMER_DATA")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetName,
    /// nopos, sinusoidal, rope, riemann, riemann-reflection, riemann-mixed,
    /// riemann-general or riemann-dense.
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
    /// Turn on locality focusing.
    #[arg(long)]
    lf: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on the first N training items only.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Write 0 in the wall-time column so reruns give identical files.
    #[arg(long)]
    no_wall_time: bool,
    /// Output directory for metrics.tsv, best.ckpt and last.ckpt.
    #[arg(long)]
    out: PathBuf,
}

fn base_configs(dataset: DatasetName, seed: u64) -> (ViTConfig, TrainConfig) {
    match dataset.cifar_kind() {
        None => (
            position_model(
                Mechanism::Riemann(riemannformer::TransformKind::BlockRotation),
                None,
            ),
            position_training(seed),
        ),
        Some(kind) => (
            trend_model(
                Mechanism::Riemann(riemannformer::TransformKind::BlockRotation),
                None,
                kind.classes(),
            ),
            TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        ),
    }
}

pub fn load_images(dataset: DatasetName, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let kind = dataset.cifar_kind().expect("image dataset");
    let dir = data.context("no data directory: pass --data or set RIEMANNFORMER_DATA")?;
    let d = load_cifar(dir, kind)?;
    Ok((Dataset::Images(d.train), Dataset::Images(d.test)))
}

pub fn run(args: &TrainArgs, seed: u64) -> Result<Verdict> {
    let (mut model, mut cfg) = base_configs(args.dataset, seed);
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        apply_config(&text, &mut model, &mut cfg).with_context(|| path.display().to_string())?;
    }
    if let Some(m) = args.mechanism {
        model.position.mechanism = m;
    }
    if args.lf {
        model.lf = Some(model.lf.unwrap_or_else(LfConfig::default));
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.subset.is_some() {
        cfg.subset = args.subset;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = lr;
    }
    if args.no_wall_time {
        cfg.record_wall_time = false;
    }

    let (train_set, test_set) = match args.dataset {
        DatasetName::Synthetic => position_data(cfg.seed)?,
        d => load_images(d, args.data.as_deref())?,
    };
    let (vit, mut store) = Vit::new(model, cfg.seed)?;
    println!(
        "{} on {} training / {} test items, {} parameters",
        model.position.mechanism.to_string() + if model.lf.is_some() { "+lf" } else { "" },
        cfg.subset.unwrap_or(train_set.len()).min(train_set.len()),
        test_set.len(),
        store.num_scalars()
    );
    let start = Instant::now();
    let report = train(
        &vit,
        &mut store,
        &cfg,
        &train_set,
        &test_set,
        &TrainOutput::to(&args.out),
        |m| {
            println!(
                "epoch {:3}  loss {:.4}  train {:.4}  test {:.4}  {:.1}s",
                m.epoch,
                m.train_loss,
                m.train_acc,
                m.test_acc,
                start.elapsed().as_secs_f64()
            );
        },
    )?;
    println!(
        "best test accuracy {:.4} at epoch {}; wrote {}",
        report.best_test_acc,
        report.best_epoch,
        args.out.display()
    );
    Ok(Verdict::Pass)
}
