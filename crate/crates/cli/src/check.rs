use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use riemannformer::gradcheck::{micro_config, micro_model_check, GradCheckConfig};
use riemannformer::verify::{replay, run_suite, Fault, DEFAULT_TRIALS, PROPERTIES};
use riemannformer::Mechanism;

use crate::{parse_mechanism, Verdict};

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    /// Flip the sign of the scale exponent in every transform.
    ScaleSign,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Only run properties whose name contains this.
    #[arg(long)]
    filter: Option<String>,
    /// Randomized trials per property.
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    /// Re-run a single trial from the sub-seed printed on failure; needs a
    /// filter that selects exactly one property.
    #[arg(long, value_name = "SUB_SEED")]
    replay: Option<u64>,
    /// Deliberately break the transforms to confirm the suite can fail.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<InjectedFault>,
}

pub fn verify(args: &VerifyArgs, seed: u64) -> Result<Verdict> {
    let fault = match args.inject_fault {
        Some(InjectedFault::ScaleSign) => Fault::ScaleSign,
        None => Fault::None,
    };
    let filter = args.filter.as_deref();
    if let Some(sub) = args.replay {
        let f = filter.unwrap_or("");
        let matches: Vec<_> = PROPERTIES.iter().filter(|p| p.name.contains(f)).collect();
        let p = match PROPERTIES.iter().find(|p| p.name == f) {
            Some(p) => p,
            None if matches.len() == 1 => matches[0],
            None => bail!("--replay needs a --filter that selects exactly one property"),
        };
        let r = replay(p, sub, fault)?;
        let ok = r <= p.tol;
        println!(
            "{} {}  sub-seed {sub}  residual {r:.3e}  tol {:.0e}",
            if ok { "PASS" } else { "FAIL" },
            p.name,
            p.tol
        );
        return Ok(if ok { Verdict::Pass } else { Verdict::Fail });
    }

    let results = run_suite(seed, args.trials, filter, fault)?;
    if results.is_empty() {
        let names: Vec<_> = PROPERTIES.iter().map(|p| p.name).collect();
        bail!(
            "no property matches {:?}; available: {}",
            filter.unwrap_or(""),
            names.join(", ")
        );
    }
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:width$}  max residual {:.3e}  tol {:.0e}  ({} trials)",
            r.name, r.max_residual, r.tol, r.trials
        );
        if !r.passed() {
            println!(
                "      worst trial {} (sub-seed {}); replay with: verify --filter {} --replay {}",
                r.worst_trial, r.worst_seed, r.name, r.worst_seed
            );
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} properties hold (seed {seed})", results.len());
        Ok(Verdict::Pass)
    } else {
        println!("failing properties: {}", failed.join(", "));
        Ok(Verdict::Fail)
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Positional mechanism of the micro model.
    #[arg(long, value_parser = parse_mechanism, default_value = "riemann")]
    mechanism: Mechanism,
    /// Turn on locality focusing.
    #[arg(long)]
    lf: bool,
    /// Largest acceptable relative error. Central differences with the
    /// default step cannot resolve much below 1e-10.
    #[arg(long, default_value_t = GradCheckConfig::default().tol)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = GradCheckConfig::default().eps)]
    eps: f64,
}

pub fn gradcheck(args: &GradcheckArgs, seed: u64) -> Result<Verdict> {
    let cfg = GradCheckConfig {
        eps: args.eps,
        tol: args.tolerance,
    };
    let model = micro_config(args.mechanism, args.lf);
    let report = micro_model_check(args.mechanism, args.lf, seed, cfg)?;
    println!(
        "{} {} (d_model {}, {} tokens): {} entries checked",
        args.mechanism,
        if args.lf { "with LF" } else { "without LF" },
        model.d_model,
        model.seq_len(),
        report.checked
    );
    for (group, err) in report.per_group() {
        println!("  {:<10} {err:.3e}", group.to_string());
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}  max relative error {:.3e}  tolerance {:.0e}",
        report.max_rel_error, report.tol
    );
    if !report.passed() {
        for e in report.worst.iter().take(5) {
            println!(
                "  {}[{}]  analytic {:.6e}  numeric {:.6e}  rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_error
            );
        }
        return Ok(Verdict::Fail);
    }
    Ok(Verdict::Pass)
}
