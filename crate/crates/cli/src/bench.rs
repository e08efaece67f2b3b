use std::time::Instant;

use anyhow::Result;
use clap::Args;
use riemannformer::presets::AttentionWorkload;
use riemannformer::Mechanism;

use crate::{parse_mechanism, Verdict};

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Timed forward passes per mechanism.
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Only time this mechanism (plus rope as the reference).
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
}

struct Row {
    mechanism: Mechanism,
    median: f64,
    p95: f64,
    ops: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn time(w: &AttentionWorkload, iters: usize, warmup: usize) -> Result<(Vec<f64>, usize)> {
    let mut ops = 0;
    for _ in 0..warmup {
        ops = w.forward()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        ops = w.forward()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    samples.sort_by(f64::total_cmp);
    Ok((samples, ops))
}

pub fn run(args: &BenchArgs, seed: u64) -> Result<Verdict> {
    anyhow::ensure!(args.iters > 0, "--iters must be positive");
    let rope: Mechanism = "rope".parse()?;
    let mechanisms: Vec<Mechanism> = match args.mechanism {
        Some(m) if m == rope => vec![rope],
        Some(m) => vec![rope, m],
        None => Mechanism::ALL.to_vec(),
    };
    println!(
        "forward of one attention layer, L={} d={} heads={}, {} iterations after {} warmup",
        args.seq_len, args.dim, args.heads, args.iters, args.warmup
    );
    println!(
        "{:<22} {:>12} {:>12} {:>8} {:>9}",
        "mechanism", "median us", "p95 us", "ops", "vs rope"
    );
    let mut rows = Vec::new();
    for m in mechanisms {
        let w = match AttentionWorkload::new(m, args.seq_len, args.dim, args.heads, seed) {
            Ok(w) => w,
            Err(e) => {
                println!("{:<22} skipped: {e}", m.to_string());
                continue;
            }
        };
        let (samples, ops) = time(&w, args.iters, args.warmup)?;
        rows.push(Row {
            mechanism: m,
            median: percentile(&samples, 0.5),
            p95: percentile(&samples, 0.95),
            ops,
        });
    }
    let reference = rows.iter().find(|r| r.mechanism == rope).map(|r| r.median);
    for r in &rows {
        let ratio = reference.map_or("-".to_string(), |base| format!("{:.2}x", r.median / base));
        println!(
            "{:<22} {:>12.1} {:>12.1} {:>8} {:>9}",
            r.mechanism.to_string(),
            r.median,
            r.p95,
            r.ops,
            ratio
        );
    }
    Ok(Verdict::Pass)
}
