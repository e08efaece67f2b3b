//! Randomized checks of the geometric identities behind tangent alignment.
//!
//! Every property draws its trials from sub-seeds of one user seed and
//! reports the largest residual, normalized by `max(1, magnitude)`, along
//! with the sub-seed that produced it so a failure can be replayed alone.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use rand::Rng as _;

use crate::error::Result;
use crate::geometry::{
    compatibility_residual, reflection_block, rotation_block, skew_exp, General2DBlock, Mat,
    Metric, Scale, ScaleMode, ScaleSchedule, SkewGenerator, TangentTransform, TransformKind,
};
use crate::positional::{apply_tangent_alignment, one_sided_score, rope, score_matrix};
use crate::rng::{derive_indexed, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_TRIALS: usize = 200;
pub const MAX_POSITION: usize = 64;

/// Deliberate defects for checking that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Transforms use `s^{+e(m)/2}` instead of `s^{-e(m)/2}`.
    ScaleSign,
}

type Trial = fn(&mut Rng, Fault) -> Result<f64>;

pub struct Property {
    pub name: &'static str,
    pub tol: f64,
    trial: Trial,
}

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub tol: f64,
    pub trials: usize,
    pub max_residual: f64,
    pub worst_trial: usize,
    pub worst_seed: u64,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tol
    }
}

pub const PROPERTIES: &[Property] = &[
    Property {
        name: "transport_norm",
        tol: 1e-10,
        trial: transport_norm,
    },
    Property {
        name: "compatibility_residual",
        tol: 1e-10,
        trial: compatibility,
    },
    Property {
        name: "relative_transform",
        tol: 1e-10,
        trial: relative_transform,
    },
    Property {
        name: "score_equivalence",
        tol: 1e-10,
        trial: score_equivalence,
    },
    Property {
        name: "reflection_algebra",
        tol: 1e-12,
        trial: reflection_algebra,
    },
    Property {
        name: "rotation_group",
        tol: 1e-12,
        trial: rotation_group,
    },
    Property {
        name: "skew_exp_block",
        tol: 1e-12,
        trial: skew_exp_block,
    },
    Property {
        name: "skew_exp_orthogonal",
        tol: 1e-10,
        trial: skew_exp_orthogonal,
    },
    Property {
        name: "general2d_identity",
        tol: 1e-10,
        trial: general2d_identity,
    },
    Property {
        name: "log_schedule",
        tol: 1e-10,
        trial: log_schedule,
    },
    Property {
        name: "rope_reduction",
        tol: 1e-12,
        trial: rope_reduction,
    },
    Property {
        name: "relative_shift",
        tol: 1e-12,
        trial: relative_shift,
    },
    Property {
        name: "scale_shift",
        tol: 1e-10,
        trial: scale_shift,
    },
    Property {
        name: "blockwise_dense",
        tol: 1e-10,
        trial: blockwise_dense,
    },
];

pub fn find(name: &str) -> Option<&'static Property> {
    PROPERTIES.iter().find(|p| p.name == name)
}

/// Runs one trial from an explicit sub-seed.
pub fn replay(p: &Property, sub_seed: u64, fault: Fault) -> Result<f64> {
    use rand::SeedableRng;
    (p.trial)(&mut Rng::seed_from_u64(sub_seed), fault)
}

pub fn run_property(
    p: &'static Property,
    seed: u64,
    trials: usize,
    fault: Fault,
) -> Result<PropertyResult> {
    let mut res = PropertyResult {
        name: p.name,
        tol: p.tol,
        trials,
        max_residual: 0.0,
        worst_trial: 0,
        worst_seed: derive_indexed(seed, p.name, 0),
    };
    for i in 0..trials {
        let sub = derive_indexed(seed, p.name, i as u64);
        let r = replay(p, sub, fault)?;
        // NaN counts as a failure
        if r.is_nan() || r > res.max_residual {
            res.max_residual = if r.is_nan() { f64::INFINITY } else { r };
            res.worst_trial = i;
            res.worst_seed = sub;
        }
    }
    Ok(res)
}

/// Runs every property whose name contains `filter`.
pub fn run_suite(
    seed: u64,
    trials: usize,
    filter: Option<&str>,
    fault: Fault,
) -> Result<Vec<PropertyResult>> {
    PROPERTIES
        .iter()
        .filter(|p| filter.is_none_or(|f| p.name.contains(f)))
        .map(|p| run_property(p, seed, trials, fault))
        .collect()
}

// -- random instances -------------------------------------------------------

fn angle(rng: &mut Rng) -> f64 {
    rng.random_range(-PI..PI)
}

fn position(rng: &mut Rng) -> usize {
    rng.random_range(0..=MAX_POSITION)
}

fn vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn schedule(rng: &mut Rng) -> ScaleSchedule {
    if rng.random_bool(0.25) {
        ScaleSchedule::Log {
            base: [2.0, 3.0, std::f64::consts::E, 10.0][rng.random_range(0..4)],
        }
    } else {
        ScaleSchedule::Linear
    }
}

/// Scale bases stay within about `e^{±0.3}` per step so `s^{64}` is finite
/// and well scaled in either mode.
fn scale(rng: &mut Rng) -> Scale {
    let sched = schedule(rng);
    if rng.random_bool(0.5) {
        Scale::new(rng.random_range(-1.0..3.0), ScaleMode::bounded()).with_schedule(sched)
    } else {
        Scale::new(rng.random_range(-0.3..0.3), ScaleMode::Free).with_schedule(sched)
    }
}

fn general_blocks(rng: &mut Rng, n: usize) -> Vec<General2DBlock> {
    (0..n)
        .map(|_| General2DBlock {
            w1: rng.random_range(-1.0..3.0),
            w2: rng.random_range(-1.0..3.0),
            theta: angle(rng),
        })
        .collect()
}

/// A random transform of `kind` with `2 * pairs` (or `4 * pairs` for the
/// mixed kind) dimensions.
pub fn random_transform(rng: &mut Rng, kind: TransformKind, pairs: usize) -> TangentTransform {
    match kind {
        TransformKind::BlockRotation => TangentTransform::BlockRotation {
            angles: (0..pairs).map(|_| angle(rng)).collect(),
            scale: scale(rng),
        },
        TransformKind::BlockReflection => TangentTransform::BlockReflection {
            angles: (0..pairs).map(|_| angle(rng)).collect(),
            scale: scale(rng),
        },
        TransformKind::Mixed4x4 => TangentTransform::Mixed4x4 {
            angles: (0..pairs).map(|_| (angle(rng), angle(rng))).collect(),
            scale: scale(rng),
        },
        TransformKind::DenseSkewExp => {
            let d = 2 * pairs;
            let upper = (0..d * (d - 1) / 2)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            TangentTransform::DenseSkewExp {
                generator: SkewGenerator::new(d, upper).expect("even dimension"),
                scale: scale(rng),
            }
        }
        TransformKind::General2D => {
            let mode = if rng.random_bool(0.5) {
                ScaleMode::bounded()
            } else {
                ScaleMode::Free
            };
            let mut blocks = general_blocks(rng, pairs);
            if mode == ScaleMode::Free {
                for b in &mut blocks {
                    b.w1 *= 0.1;
                    b.w2 *= 0.1;
                }
            }
            TangentTransform::General2D {
                blocks,
                mode,
                schedule: schedule(rng),
            }
        }
    }
}

fn random_any(rng: &mut Rng) -> TangentTransform {
    let kind = TransformKind::ALL[rng.random_range(0..TransformKind::ALL.len())];
    let pairs = rng.random_range(1..=4);
    random_transform(rng, kind, pairs)
}

/// The transform actually used by a trial: the faulty variant flips the sign
/// of the scale exponent while the metric keeps the true scale.
fn under_fault(t: &TangentTransform, fault: Fault) -> TangentTransform {
    if fault == Fault::None {
        return t.clone();
    }
    let flip = |s: &Scale| Scale {
        w: -s.ln_value(),
        mode: ScaleMode::Free,
        schedule: s.schedule,
    };
    match t {
        TangentTransform::BlockRotation { angles, scale } => TangentTransform::BlockRotation {
            angles: angles.clone(),
            scale: flip(scale),
        },
        TangentTransform::BlockReflection { angles, scale } => TangentTransform::BlockReflection {
            angles: angles.clone(),
            scale: flip(scale),
        },
        TangentTransform::Mixed4x4 { angles, scale } => TangentTransform::Mixed4x4 {
            angles: angles.clone(),
            scale: flip(scale),
        },
        TangentTransform::DenseSkewExp { generator, scale } => TangentTransform::DenseSkewExp {
            generator: generator.clone(),
            scale: flip(scale),
        },
        TangentTransform::General2D {
            blocks,
            mode,
            schedule,
        } => TangentTransform::General2D {
            blocks: blocks
                .iter()
                .map(|b| General2DBlock {
                    w1: -mode.ln_scale(b.w1),
                    w2: -mode.ln_scale(b.w2),
                    theta: b.theta,
                })
                .collect(),
            mode: ScaleMode::Free,
            schedule: *schedule,
        },
    }
}

/// Compatibility residual relative to the size of the factors in
/// `T^T M T`, which for anisotropic scales can be far from one even though
/// the product is well scaled.
fn compat_rel(metric: &Metric, used: &TangentTransform, m: usize, n: usize) -> Result<f64> {
    let d = used.dim() as f64;
    let size = |k: usize| frob(&used.matrix(k)).powi(2) * frob(&metric.matrix(k)) / d.powf(1.5);
    Ok(compatibility_residual(metric, used, m, n)? / size(m).max(size(n)).max(1.0))
}

fn frob(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rel(diff: f64, magnitude: f64) -> f64 {
    diff.abs() / magnitude.abs().max(1.0)
}

fn mat_rel(a: &Mat, b: &Mat) -> f64 {
    frob(&(a - b)) / frob(b).max(1.0)
}

fn m2_rel(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

// -- properties ---------------------------------------------------------------

fn transport_norm(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let t = random_any(rng);
    let metric = t.paired_metric();
    let used = under_fault(&t, fault);
    let (m, n) = (position(rng), position(rng));
    let v = vector(rng, t.dim());
    let pv = used.parallel_transport(n, m, &v)?;
    let before = metric.inner(n, &v, &v)?;
    let after = metric.inner(m, &pv, &pv)?;
    let sq = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
    let size = (frob(&metric.matrix(n)) * sq(&v)).max(frob(&metric.matrix(m)) * sq(&pv));
    Ok(rel(after - before, size))
}

fn compatibility(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let t = random_any(rng);
    let used = under_fault(&t, fault);
    let (m, n) = (position(rng), position(rng));
    compat_rel(&t.paired_metric(), &used, m, n)
}

fn relative_transform(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let t = under_fault(&random_any(rng), fault);
    let (m, n) = (position(rng), position(rng));
    let product = t.matrix(m) * t.inverse_matrix(n);
    let closed = t.relative(m, n);
    let d = t.dim();
    let inverse = mat_rel(&(t.matrix(m) * t.inverse_matrix(m)), &Mat::identity(d, d));
    Ok(mat_rel(&closed, &product).max(inverse))
}

fn aligned_dot(t: &TangentTransform, m: usize, n: usize, q: &[f64], k: &[f64]) -> Result<f64> {
    let d = t.dim();
    let qa = apply_tangent_alignment(&Tensor::new(vec![1, d], q.to_vec())?, &[m], t)?;
    let ka = apply_tangent_alignment(&Tensor::new(vec![1, d], k.to_vec())?, &[n], t)?;
    Ok(qa.data().iter().zip(ka.data()).map(|(a, b)| a * b).sum())
}

fn score_equivalence(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let t = random_any(rng);
    let used = under_fault(&t, fault);
    let (m, n) = (position(rng), position(rng));
    let q = vector(rng, t.dim());
    let k = vector(rng, t.dim());
    let two_sided = aligned_dot(&used, m, n, &q, &k)?;
    let one_sided = one_sided_score(&t.paired_metric(), &t, m, n, &q, &k)?;
    let mut worst = rel(two_sided - one_sided, one_sided);
    // the rotation kind also has an explicit closed form:
    // q^T s^{(e(m)+e(n))/2} blockdiag(R((m-n) theta)) k
    if let TangentTransform::BlockRotation { angles, scale } = &t {
        let e = scale.schedule.exponent(m) + scale.schedule.exponent(n);
        let f = (0.5 * e * scale.ln_value()).exp();
        let mut direct = 0.0;
        for (j, &th) in angles.iter().enumerate() {
            let r = rotation_block((m as f64 - n as f64) * th);
            let kv = r * nalgebra::Vector2::new(k[2 * j], k[2 * j + 1]);
            direct += q[2 * j] * kv[0] + q[2 * j + 1] * kv[1];
        }
        direct *= f;
        worst = worst.max(rel(two_sided - direct, direct));
    }
    Ok(worst)
}

fn reflection_algebra(rng: &mut Rng, _: Fault) -> Result<f64> {
    let (t, t1, t2) = (angle(rng), angle(rng), angle(rng));
    let r = reflection_block(t);
    let det = (r.determinant() + 1.0).abs();
    let involution = m2_rel(&(r * r), &Matrix2::identity());
    let product = m2_rel(
        &(reflection_block(t1 / 2.0) * reflection_block(t2 / 2.0)),
        &rotation_block(t1 - t2),
    );
    let mixed = reflection_block(t2) * rotation_block(t1);
    let mixed_det = (mixed.determinant() + 1.0).abs();
    let mixed_inv = m2_rel(&(mixed * mixed), &Matrix2::identity());
    Ok(det
        .max(involution)
        .max(product)
        .max(mixed_det)
        .max(mixed_inv))
}

fn rotation_group(rng: &mut Rng, _: Fault) -> Result<f64> {
    let (a, b) = (angle(rng), angle(rng));
    let r = rotation_block(a);
    let det = (r.determinant() - 1.0).abs();
    Ok(m2_rel(&(r * rotation_block(b)), &rotation_block(a + b)).max(det))
}

fn skew_exp_block(rng: &mut Rng, _: Fault) -> Result<f64> {
    let pairs = rng.random_range(1..=8);
    let d = 2 * pairs;
    let mut x = Mat::zeros(d, d);
    let mut expect = Mat::zeros(d, d);
    for j in 0..pairs {
        let th = rng.random_range(-4.0 * PI..4.0 * PI);
        x[(2 * j, 2 * j + 1)] = -th;
        x[(2 * j + 1, 2 * j)] = th;
        expect
            .view_mut((2 * j, 2 * j), (2, 2))
            .copy_from(&rotation_block(th));
    }
    Ok(mat_rel(&skew_exp(&x)?, &expect))
}

fn skew_exp_orthogonal(rng: &mut Rng, _: Fault) -> Result<f64> {
    let d = 8;
    let upper = (0..d * (d - 1) / 2)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let x = SkewGenerator::new(d, upper)?.matrix();
    let e = skew_exp(&x)?;
    Ok(mat_rel(&(e.transpose() * &e), &Mat::identity(d, d)))
}

fn general2d_identity(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let pairs = rng.random_range(1..=4);
    let t = random_transform(rng, TransformKind::General2D, pairs);
    let TangentTransform::General2D {
        blocks,
        mode,
        schedule,
    } = &t
    else {
        unreachable!()
    };
    let (m, n) = (position(rng), position(rng));
    let compat = compat_rel(&t.paired_metric(), &under_fault(&t, fault), m, n)?;
    // metric against the triple product R^T S^{e(m)} R built densely
    let e = schedule.exponent(m);
    let mut triple = Mat::zeros(2 * pairs, 2 * pairs);
    for (j, b) in blocks.iter().enumerate() {
        let r = rotation_block(m as f64 * b.theta);
        let s = Matrix2::new(
            (e * mode.ln_scale(b.w1)).exp(),
            0.0,
            0.0,
            (e * mode.ln_scale(b.w2)).exp(),
        );
        triple
            .view_mut((2 * j, 2 * j), (2, 2))
            .copy_from(&(r.transpose() * s * r));
    }
    let metric = mat_rel(&t.paired_metric().matrix(m), &triple);
    Ok(compat.max(metric))
}

fn log_schedule(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let base = rng.random_range(2..=10) as f64;
    let k = rng.random_range(0..=(40.0 / base.log2()) as i32);
    let sched = ScaleSchedule::Log { base };
    let exact = (sched.exponent(base.powi(k) as usize) - k as f64).abs();
    let t = TangentTransform::BlockRotation {
        angles: vec![angle(rng), angle(rng)],
        scale: Scale::new(rng.random_range(-1.0..3.0), ScaleMode::bounded()).with_schedule(sched),
    };
    let (m, n) = (position(rng), position(rng));
    let compat = compat_rel(&t.paired_metric(), &under_fault(&t, fault), m, n)?;
    Ok(exact.max(compat))
}

fn random_rows(rng: &mut Rng, l: usize, d: usize) -> Result<Tensor> {
    Tensor::new(vec![l, d], vector(rng, l * d))
}

/// Riemann rotation at `s = 1` with angles `-theta` against the standard
/// rotary kernel with angles `theta`, over full score matrices.
fn rope_reduction(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let l = rng.random_range(1..=64);
    let d = 2 * rng.random_range(1..=32);
    let angles: Vec<f64> = (0..d / 2).map(|_| angle(rng)).collect();
    let positions: Vec<usize> = (0..l).collect();
    let q = random_rows(rng, l, d)?;
    let k = random_rows(rng, l, d)?;
    let t = under_fault(
        &TangentTransform::BlockRotation {
            angles: angles.iter().map(|a| -a).collect(),
            scale: Scale::unit(),
        },
        fault,
    );
    let ours = score_matrix(
        &apply_tangent_alignment(&q, &positions, &t)?,
        &apply_tangent_alignment(&k, &positions, &t)?,
    )?;
    let reference = score_matrix(
        &rope(&q, &positions, &angles)?,
        &rope(&k, &positions, &angles)?,
    )?;
    let mag = reference.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(rel(ours.max_abs_diff(&reference), mag))
}

fn shifted_scores(t: &TangentTransform, q: &Tensor, k: &Tensor, shift: usize) -> Result<Tensor> {
    let positions: Vec<usize> = (shift..shift + q.shape()[0]).collect();
    score_matrix(
        &apply_tangent_alignment(q, &positions, t)?,
        &apply_tangent_alignment(k, &positions, t)?,
    )
}

/// At `s = 1` scores depend only on position differences.
fn relative_shift(rng: &mut Rng, _: Fault) -> Result<f64> {
    let l = rng.random_range(1..=32);
    let d = 2 * rng.random_range(1..=16);
    let t = TangentTransform::BlockRotation {
        angles: (0..d / 2).map(|_| angle(rng)).collect(),
        scale: Scale::unit(),
    };
    let q = random_rows(rng, l, d)?;
    let k = random_rows(rng, l, d)?;
    let base = shifted_scores(&t, &q, &k, 0)?;
    let moved = shifted_scores(&t, &q, &k, rng.random_range(1..=32))?;
    let mag = base.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(rel(moved.max_abs_diff(&base), mag))
}

/// At `s != 1` a shift by `c` scales every logit by `s^c`.
fn scale_shift(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let l = rng.random_range(1..=16);
    let d = 2 * rng.random_range(1..=8);
    let t = TangentTransform::BlockRotation {
        angles: (0..d / 2).map(|_| angle(rng)).collect(),
        scale: Scale::new(rng.random_range(-1.0..3.0), ScaleMode::bounded()),
    };
    let used = under_fault(&t, fault);
    let q = random_rows(rng, l, d)?;
    let k = random_rows(rng, l, d)?;
    let c = rng.random_range(1..=16);
    let base = shifted_scores(&used, &q, &k, 0)?;
    let moved = shifted_scores(&used, &q, &k, c)?;
    let factor = (c as f64 * t.scale().expect("scalar").ln_value()).exp();
    let expect = base.map(|v| v * factor);
    let mag = expect.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(moved.max_abs_diff(&expect) / mag.max(f64::MIN_POSITIVE))
}

fn blockwise_dense(rng: &mut Rng, fault: Fault) -> Result<f64> {
    let t = under_fault(&random_any(rng), fault);
    let l = rng.random_range(1..=16);
    let positions: Vec<usize> = (0..l).map(|_| position(rng)).collect();
    let x = random_rows(rng, l, t.dim())?;
    let fast = apply_tangent_alignment(&x, &positions, &t)?;
    let mut worst = 0.0f64;
    for (i, &p) in positions.iter().enumerate() {
        let inv = t.inverse_matrix(p);
        let row = &x.data()[i * t.dim()..(i + 1) * t.dim()];
        for r in 0..t.dim() {
            let dense: f64 = (0..t.dim()).map(|c| inv[(r, c)] * row[c]).sum();
            worst = worst.max(rel(fast.get(&[i, r]) - dense, dense));
        }
    }
    Ok(worst)
}
