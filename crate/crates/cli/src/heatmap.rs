use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use riemannformer::data::{
    synthetic_images, synthetic_position_task, CifarKind, Dataset, ImageSet,
};
use riemannformer::presets::POSITION_TEST;
use riemannformer::rng::derive_seed;
use riemannformer::{Checkpoint, Graph, InputSpec, Tensor};

use crate::train::{load_images, DatasetName};
use crate::Verdict;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    /// Post-softmax attention weights.
    Scores,
    /// Locality-focusing attenuation.
    Omega,
    /// Their elementwise product, the weights actually applied to values.
    Product,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Pgm,
}

#[derive(Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test-set item fed through the model.
    #[arg(long, default_value_t = 0)]
    image_index: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long, value_enum)]
    what: What,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: PathBuf,
    /// Where test items come from. Token models always use the synthetic
    /// task; image models default to CIFAR from `--data`.
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,
    #[arg(long, env = "RIEMANNFORMER_DATA")]
    data: Option<PathBuf>,
}

/// One value per entry, `{:.16e}`, comma separated, one row per line.
pub fn to_csv(m: &Tensor) -> String {
    let n = m.shape()[1];
    let mut out = String::new();
    for row in m.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("writing to a string");
    }
    out
}

/// Binary greymap, min-max normalized so the smallest entry is black and the
/// largest white. A constant matrix comes out black.
pub fn to_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let min = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if range > 0.0 {
            ((v - min) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

fn sample(ck: &Checkpoint, args: &HeatmapArgs, seed: u64) -> Result<Tensor> {
    let index = args.image_index;
    let data = match ck.config.input {
        InputSpec::Tokens { len, .. } => {
            let count = POSITION_TEST.max(index + 1);
            Dataset::Tokens(synthetic_position_task(
                len,
                count,
                derive_seed(seed, "position-test"),
            )?)
        }
        InputSpec::Image { .. } => match args.dataset.unwrap_or(DatasetName::Cifar10) {
            DatasetName::Synthetic => {
                let kind = if ck.config.classes > 10 {
                    CifarKind::Cifar100
                } else {
                    CifarKind::Cifar10
                };
                Dataset::Images(ImageSet {
                    kind,
                    images: synthetic_images(kind, index + 1, seed),
                })
            }
            d => load_images(d, args.data.as_deref())?.1,
        },
    };
    if index >= data.len() {
        bail!(
            "--image-index {index} is past the end of the {} test items",
            data.len()
        );
    }
    Ok(data.batch(&[index], ck.config.input, None)?)
}

pub fn run(args: &HeatmapArgs, seed: u64) -> Result<Verdict> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (vit, store) = ck.model()?;
    let cfg = ck.config;
    if args.layer >= cfg.layers || args.head >= cfg.heads {
        bail!("model has {} layers and {} heads", cfg.layers, cfg.heads);
    }
    if args.what != What::Scores && cfg.lf.is_none() {
        bail!(
            "{} was trained without locality focusing, so it has no attenuation",
            args.checkpoint.display()
        );
    }
    let input = sample(&ck, args, seed)?;

    let mut g = Graph::new();
    let x = g.constant(input)?;
    let mut trace = Vec::new();
    vit.forward(&mut g, &store, x, Some(&mut trace))?;
    let t = &trace[args.layer];
    let l = cfg.seq_len();
    let head_slice = |v: &Tensor, offset: usize| {
        Tensor::new(
            vec![l, l],
            v.data()[offset * l * l..(offset + 1) * l * l].to_vec(),
        )
        .expect("square slice")
    };
    // scores are [1, H, L, L] and omega [H, L, L], so head h starts at h*L*L in both
    let scores = head_slice(g.value(t.scores), args.head);
    let omega = t.omega.map(|o| head_slice(g.value(o), args.head));
    let matrix = match (args.what, omega) {
        (What::Scores, _) => scores,
        (What::Omega, Some(o)) => o,
        (What::Product, Some(o)) => {
            let data = scores
                .data()
                .iter()
                .zip(o.data())
                .map(|(a, b)| a * b)
                .collect();
            Tensor::new(vec![l, l], data)?
        }
        (_, None) => unreachable!("checked above"),
    };
    let bytes = match args.format {
        Format::Csv => to_csv(&matrix).into_bytes(),
        Format::Pgm => to_pgm(&matrix),
    };
    fs::write(&args.out, bytes).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {l}x{l} matrix to {}", args.out.display());
    Ok(Verdict::Pass)
}
