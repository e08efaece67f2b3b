//! Metric tensors, tangent transforms and parallel transport between token
//! positions.
//!
//! Every position `m` carries a tangent transform `T_m` from a shared
//! reference space and a metric `M_m`. Transport from position `n` to `m`
//! is `T_m T_n^{-1}`, and a transform/metric pair is compatible when
//! `T_m^T M_m T_m` does not depend on `m`, which makes transport preserve
//! metric norms.
//!
//! Scale factors `s^{e(m)}` are always formed as `exp(e(m) ln s)` so long
//! sequences do not under- or overflow on the way.

use nalgebra::{DMatrix, Matrix2};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// How the raw parameter `w` maps to the positive scale base `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleMode {
    /// `s = exp(w) / (exp(w) + alpha)`, always below 1 for `alpha > 0`.
    Bounded { alpha: f64 },
    /// `s = exp(w)`.
    Free,
}

impl ScaleMode {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn bounded() -> Self {
        ScaleMode::Bounded {
            alpha: Self::DEFAULT_ALPHA,
        }
    }

    /// `ln s` for raw parameter `w`.
    pub fn ln_scale(self, w: f64) -> f64 {
        match self {
            // ln(e^w / (e^w + a)) = -ln(1 + a e^{-w}) = -softplus(ln a - w)
            ScaleMode::Bounded { alpha } => {
                let z = alpha.ln() - w;
                -(z.max(0.0) + (-z.abs()).exp().ln_1p())
            }
            ScaleMode::Free => w,
        }
    }

    pub fn scale(self, w: f64) -> f64 {
        self.ln_scale(w).exp()
    }
}

/// Exponent `e(m)` applied to the scale base at position `m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleSchedule {
    /// `e(m) = m`.
    Linear,
    /// `e(m) = log_base(m)` for `m >= 1`, `e(0) = 0`.
    Log { base: f64 },
}

impl ScaleSchedule {
    pub fn exponent(self, m: usize) -> f64 {
        match self {
            ScaleSchedule::Linear => m as f64,
            ScaleSchedule::Log { .. } if m == 0 => 0.0,
            ScaleSchedule::Log { base } => {
                let e = (m as f64).ln() / base.ln();
                // exact integers at exact powers of the base
                let k = e.round();
                if k >= 0.0 && k <= i32::MAX as f64 && base.powi(k as i32) == m as f64 {
                    k
                } else {
                    e
                }
            }
        }
    }
}

/// A learnable scale base together with its positional schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scale {
    pub w: f64,
    pub mode: ScaleMode,
    pub schedule: ScaleSchedule,
}

impl Scale {
    pub fn new(w: f64, mode: ScaleMode) -> Self {
        Scale {
            w,
            mode,
            schedule: ScaleSchedule::Linear,
        }
    }

    /// `s = 1` exactly.
    pub fn unit() -> Self {
        Scale::new(0.0, ScaleMode::Free)
    }

    pub fn with_schedule(mut self, schedule: ScaleSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn value(&self) -> f64 {
        self.mode.scale(self.w)
    }

    pub fn ln_value(&self) -> f64 {
        self.mode.ln_scale(self.w)
    }

    /// `s^{k e(m)}`.
    pub fn pow_at(&self, k: f64, m: usize) -> f64 {
        (k * self.schedule.exponent(m) * self.ln_value()).exp()
    }
}

/// Counterclockwise rotation by `theta`.
pub fn rotation_block(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Reflection about the axis `(cos theta, sin theta)`.
pub fn reflection_block(theta: f64) -> Matrix2<f64> {
    let (s, c) = (2.0 * theta).sin_cos();
    Matrix2::new(c, s, s, -c)
}

fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `exp(X)` by scaling-and-squaring around a Taylor series summed to
/// machine precision. The scaled argument has Frobenius norm below 0.5.
pub fn skew_exp(x: &Mat) -> Result<Mat> {
    if !x.is_square() {
        return Err(Error::shape(
            "skew_exp",
            format!("{}x{} is not square", x.nrows(), x.ncols()),
        ));
    }
    let n = x.nrows();
    let norm = frobenius(x);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let a = x * 0.5f64.powi(squarings);
    let mut sum = Mat::identity(n, n);
    let mut term = Mat::identity(n, n);
    for k in 1..40 {
        term = &term * &a / k as f64;
        sum += &term;
        if frobenius(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// A skew-symmetric generator stored as its strict upper triangle, so
/// `X + X^T = 0` holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewGenerator {
    dim: usize,
    upper: Vec<f64>,
}

impl SkewGenerator {
    pub fn new(dim: usize, upper: Vec<f64>) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "skew generator dimension {dim} must be even and >= 2"
            )));
        }
        if upper.len() != dim * (dim - 1) / 2 {
            return Err(Error::shape(
                "skew_generator",
                format!(
                    "dimension {dim} needs {} entries, got {}",
                    dim * (dim - 1) / 2,
                    upper.len()
                ),
            ));
        }
        Ok(SkewGenerator { dim, upper })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(dim, vec![0.0; dim * dim.saturating_sub(1) / 2])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn matrix(&self) -> Mat {
        let n = self.dim;
        let mut x = Mat::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                x[(i, j)] = self.upper[k];
                x[(j, i)] = -self.upper[k];
                k += 1;
            }
        }
        x
    }
}

/// One 2-D block of the general-form metric: `S = diag(s1, s2)` plus an angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct General2DBlock {
    pub w1: f64,
    pub w2: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    /// `M_m = s^{e(m)} I`.
    Scalar { scale: Scale, dim: usize },
    /// `M_m = diag(s_j^{e(m)})`.
    Diagonal {
        w: Vec<f64>,
        mode: ScaleMode,
        schedule: ScaleSchedule,
    },
    /// Block-diagonal `R(-m theta) S^{e(m)} R(m theta)`.
    General2D {
        blocks: Vec<General2DBlock>,
        mode: ScaleMode,
        schedule: ScaleSchedule,
    },
}

impl Metric {
    pub fn dim(&self) -> usize {
        match self {
            Metric::Scalar { dim, .. } => *dim,
            Metric::Diagonal { w, .. } => w.len(),
            Metric::General2D { blocks, .. } => 2 * blocks.len(),
        }
    }

    pub fn matrix(&self, m: usize) -> Mat {
        match self {
            Metric::Scalar { scale, dim } => Mat::identity(*dim, *dim) * scale.pow_at(1.0, m),
            Metric::Diagonal { w, mode, schedule } => {
                let e = schedule.exponent(m);
                Mat::from_diagonal(&nalgebra::DVector::from_iterator(
                    w.len(),
                    w.iter().map(|&wj| (e * mode.ln_scale(wj)).exp()),
                ))
            }
            Metric::General2D {
                blocks,
                mode,
                schedule,
            } => {
                let e = schedule.exponent(m);
                block_diag(blocks.iter().map(|b| {
                    let s = Matrix2::new(
                        (e * mode.ln_scale(b.w1)).exp(),
                        0.0,
                        0.0,
                        (e * mode.ln_scale(b.w2)).exp(),
                    );
                    rotation_block(-(m as f64) * b.theta) * s * rotation_block(m as f64 * b.theta)
                }))
            }
        }
    }

    /// `a^T M_m b`.
    pub fn inner(&self, m: usize, a: &[f64], b: &[f64]) -> Result<f64> {
        let d = self.dim();
        if a.len() != d || b.len() != d {
            return Err(Error::shape(
                "metric_inner",
                format!(
                    "metric is {d}-dimensional, vectors are {} and {}",
                    a.len(),
                    b.len()
                ),
            ));
        }
        let mm = self.matrix(m);
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += a[i] * mm[(i, j)] * b[j];
            }
        }
        Ok(acc)
    }
}

fn block_diag(blocks: impl IntoIterator<Item = Matrix2<f64>>) -> Mat {
    let blocks: Vec<_> = blocks.into_iter().collect();
    let d = 2 * blocks.len();
    let mut out = Mat::zeros(d, d);
    for (i, b) in blocks.iter().enumerate() {
        out.view_mut((2 * i, 2 * i), (2, 2)).copy_from(b);
    }
    out
}

/// Which family a [`TangentTransform`] belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    BlockRotation,
    BlockReflection,
    Mixed4x4,
    DenseSkewExp,
    General2D,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::BlockRotation,
        TransformKind::BlockReflection,
        TransformKind::Mixed4x4,
        TransformKind::DenseSkewExp,
        TransformKind::General2D,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::BlockRotation => "rotation",
            TransformKind::BlockReflection => "reflection",
            TransformKind::Mixed4x4 => "mixed",
            TransformKind::DenseSkewExp => "dense",
            TransformKind::General2D => "general",
        }
    }
}

/// The map `T_m` from the reference space to the tangent space at position `m`.
#[derive(Clone, Debug, PartialEq)]
pub enum TangentTransform {
    /// `s^{-e(m)/2} blockdiag(R(m theta_j))`.
    BlockRotation { angles: Vec<f64>, scale: Scale },
    /// `s^{-e(m)/2} blockdiag(Rhat(m theta_j))`.
    BlockReflection { angles: Vec<f64>, scale: Scale },
    /// `s^{-e(m)/2}` times 4x4 blocks `diag(R(m theta_1), Rhat(m theta_2))`.
    Mixed4x4 {
        angles: Vec<(f64, f64)>,
        scale: Scale,
    },
    /// `s^{-e(m)/2} exp(m X)`.
    DenseSkewExp {
        generator: SkewGenerator,
        scale: Scale,
    },
    /// Blocks `R(-m theta) S^{-e(m)/2}`, paired with [`Metric::General2D`].
    General2D {
        blocks: Vec<General2DBlock>,
        mode: ScaleMode,
        schedule: ScaleSchedule,
    },
}

impl TangentTransform {
    pub fn kind(&self) -> TransformKind {
        match self {
            TangentTransform::BlockRotation { .. } => TransformKind::BlockRotation,
            TangentTransform::BlockReflection { .. } => TransformKind::BlockReflection,
            TangentTransform::Mixed4x4 { .. } => TransformKind::Mixed4x4,
            TangentTransform::DenseSkewExp { .. } => TransformKind::DenseSkewExp,
            TangentTransform::General2D { .. } => TransformKind::General2D,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TangentTransform::BlockRotation { angles, .. }
            | TangentTransform::BlockReflection { angles, .. } => 2 * angles.len(),
            TangentTransform::Mixed4x4 { angles, .. } => 4 * angles.len(),
            TangentTransform::DenseSkewExp { generator, .. } => generator.dim(),
            TangentTransform::General2D { blocks, .. } => 2 * blocks.len(),
        }
    }

    /// The scalar scale, for kinds that have one.
    pub fn scale(&self) -> Option<&Scale> {
        match self {
            TangentTransform::BlockRotation { scale, .. }
            | TangentTransform::BlockReflection { scale, .. }
            | TangentTransform::Mixed4x4 { scale, .. }
            | TangentTransform::DenseSkewExp { scale, .. } => Some(scale),
            TangentTransform::General2D { .. } => None,
        }
    }

    /// The metric whose compatibility identity this transform satisfies.
    pub fn paired_metric(&self) -> Metric {
        match self {
            TangentTransform::General2D {
                blocks,
                mode,
                schedule,
            } => Metric::General2D {
                blocks: blocks.clone(),
                mode: *mode,
                schedule: *schedule,
            },
            other => Metric::Scalar {
                scale: *other.scale().expect("scalar-scaled kind"),
                dim: other.dim(),
            },
        }
    }

    /// The 2x2 blocks of `T_m` (`inverse = false`) or `T_m^{-1}`, along the
    /// diagonal. `None` for the dense kind.
    pub fn blocks(&self, m: usize, inverse: bool) -> Option<Vec<Matrix2<f64>>> {
        let mf = m as f64;
        let sign = if inverse { 1.0 } else { -1.0 };
        let out = match self {
            TangentTransform::BlockRotation { angles, scale } => {
                let f = scale.pow_at(sign / 2.0, m);
                angles
                    .iter()
                    .map(|&t| rotation_block(-sign * mf * t) * f)
                    .collect()
            }
            TangentTransform::BlockReflection { angles, scale } => {
                let f = scale.pow_at(sign / 2.0, m);
                angles
                    .iter()
                    .map(|&t| reflection_block(mf * t) * f)
                    .collect()
            }
            TangentTransform::Mixed4x4 { angles, scale } => {
                let f = scale.pow_at(sign / 2.0, m);
                angles
                    .iter()
                    .flat_map(|&(t1, t2)| {
                        [
                            rotation_block(-sign * mf * t1) * f,
                            reflection_block(mf * t2) * f,
                        ]
                    })
                    .collect()
            }
            TangentTransform::DenseSkewExp { .. } => return None,
            TangentTransform::General2D {
                blocks,
                mode,
                schedule,
            } => {
                let e = schedule.exponent(m);
                blocks
                    .iter()
                    .map(|b| {
                        let s = Matrix2::new(
                            (sign * e / 2.0 * mode.ln_scale(b.w1)).exp(),
                            0.0,
                            0.0,
                            (sign * e / 2.0 * mode.ln_scale(b.w2)).exp(),
                        );
                        if inverse {
                            // S^{e/2} R(m theta)
                            s * rotation_block(mf * b.theta)
                        } else {
                            // R(-m theta) S^{-e/2}
                            rotation_block(-mf * b.theta) * s
                        }
                    })
                    .collect()
            }
        };
        Some(out)
    }

    fn dense(&self, m: usize, inverse: bool) -> Result<Mat> {
        match self {
            TangentTransform::DenseSkewExp { generator, scale } => {
                let sign = if inverse { -1.0 } else { 1.0 };
                let e = skew_exp(&(generator.matrix() * (sign * m as f64)))?;
                Ok(e * scale.pow_at(-sign / 2.0, m))
            }
            _ => Ok(block_diag(self.blocks(m, inverse).expect("block kind"))),
        }
    }

    /// `T_m` as a dense matrix.
    pub fn matrix(&self, m: usize) -> Mat {
        self.dense(m, false).expect("generator is square")
    }

    /// `T_m^{-1}`, formed analytically.
    pub fn inverse_matrix(&self, m: usize) -> Mat {
        self.dense(m, true).expect("generator is square")
    }

    /// Closed form of `T_m T_n^{-1}`.
    pub fn relative(&self, m: usize, n: usize) -> Mat {
        let d = m as f64 - n as f64;
        match self {
            TangentTransform::BlockRotation { angles, scale } => {
                let f = relative_factor(scale, m, n);
                block_diag(angles.iter().map(|&t| rotation_block(d * t) * f))
            }
            TangentTransform::BlockReflection { angles, scale } => {
                // Rhat(a) Rhat(b) = R(2a - 2b)
                let f = relative_factor(scale, m, n);
                block_diag(angles.iter().map(|&t| rotation_block(2.0 * d * t) * f))
            }
            TangentTransform::Mixed4x4 { angles, scale } => {
                let f = relative_factor(scale, m, n);
                block_diag(angles.iter().flat_map(|&(t1, t2)| {
                    [rotation_block(d * t1) * f, rotation_block(2.0 * d * t2) * f]
                }))
            }
            TangentTransform::DenseSkewExp { generator, scale } => {
                let f = relative_factor(scale, m, n);
                skew_exp(&(generator.matrix() * d)).expect("generator is square") * f
            }
            TangentTransform::General2D {
                blocks,
                mode,
                schedule,
            } => {
                // R(-m theta) S^{(e(n) - e(m))/2} R(n theta)
                let de = (schedule.exponent(n) - schedule.exponent(m)) / 2.0;
                block_diag(blocks.iter().map(|b| {
                    let s = Matrix2::new(
                        (de * mode.ln_scale(b.w1)).exp(),
                        0.0,
                        0.0,
                        (de * mode.ln_scale(b.w2)).exp(),
                    );
                    rotation_block(-(m as f64) * b.theta) * s * rotation_block(n as f64 * b.theta)
                }))
            }
        }
    }

    /// Carries `v` from the tangent space at `n` to the one at `m`.
    pub fn parallel_transport(&self, n: usize, m: usize, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if v.len() != d {
            return Err(Error::shape(
                "parallel_transport",
                format!("transform is {d}-dimensional, vector has {}", v.len()),
            ));
        }
        let p = self.relative(m, n);
        Ok((0..d)
            .map(|i| (0..d).map(|j| p[(i, j)] * v[j]).sum())
            .collect())
    }
}

/// `s^{(e(n) - e(m))/2}`.
fn relative_factor(scale: &Scale, m: usize, n: usize) -> f64 {
    let e = scale.schedule.exponent(n) - scale.schedule.exponent(m);
    (0.5 * e * scale.ln_value()).exp()
}

/// `|| T_m^T M_m T_m - T_n^T M_n T_n ||_F`, zero for a compatible pair.
pub fn compatibility_residual(
    metric: &Metric,
    t: &TangentTransform,
    m: usize,
    n: usize,
) -> Result<f64> {
    if metric.dim() != t.dim() {
        return Err(Error::shape(
            "compatibility_residual",
            format!("metric dim {} vs transform dim {}", metric.dim(), t.dim()),
        ));
    }
    if m == n {
        return Ok(0.0);
    }
    let pull = |k: usize| {
        let tk = t.matrix(k);
        tk.transpose() * metric.matrix(k) * tk
    };
    Ok(frobenius(&(pull(m) - pull(n))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        (a - b).iter().all(|v| v.abs() <= tol)
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_block(0.0), Matrix2::identity());
        let q = rotation_block(FRAC_PI_2);
        assert!((q - Matrix2::new(0.0, -1.0, 1.0, 0.0)).abs().max() < 1e-16);
        assert!((q.determinant() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reflection_examples() {
        assert_eq!(reflection_block(0.0), Matrix2::new(1.0, 0.0, 0.0, -1.0));
        let r = reflection_block(0.37);
        assert!((r.determinant() + 1.0).abs() < 1e-15);
        assert!((r * r - Matrix2::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn skew_exp_of_zero_and_non_square() {
        assert_eq!(skew_exp(&Mat::zeros(4, 4)).unwrap(), Mat::identity(4, 4));
        assert!(skew_exp(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn bounded_scale_at_zero() {
        let s = Scale::new(0.0, ScaleMode::bounded());
        assert!((s.value() - 1.0 / 1.1).abs() < 1e-15);
        let metric = Metric::Scalar { scale: s, dim: 3 };
        assert!(close(
            &metric.matrix(1),
            &(Mat::identity(3, 3) / 1.1),
            1e-15
        ));
        assert_eq!(metric.matrix(0), Mat::identity(3, 3));
    }

    #[test]
    fn bounded_scale_stays_below_one() {
        for w in [-50.0, -3.0, 0.0, 3.0, 30.0] {
            let s = ScaleMode::bounded().scale(w);
            assert!(s > 0.0 && s < 1.0, "w={w} s={s}");
        }
    }

    #[test]
    fn log_schedule_exact_at_powers() {
        let sched = ScaleSchedule::Log { base: 2.0 };
        assert_eq!(sched.exponent(0), 0.0);
        assert_eq!(sched.exponent(1), 0.0);
        for k in 0..20 {
            assert_eq!(sched.exponent(1 << k), k as f64);
        }
        let sched = ScaleSchedule::Log { base: 3.0 };
        assert_eq!(sched.exponent(243), 5.0);
    }

    #[test]
    fn transform_examples() {
        let rot = TangentTransform::BlockRotation {
            angles: vec![FRAC_PI_2],
            scale: Scale::unit(),
        };
        assert!(close(
            &rot.matrix(1),
            &Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
            1e-16
        ));
        // s = 0.81 via the free mode
        let scaled = TangentTransform::BlockRotation {
            angles: vec![0.0],
            scale: Scale::new(0.81f64.ln(), ScaleMode::Free),
        };
        let expect = Mat::identity(2, 2) * (1.0 / 0.81);
        assert!(close(&scaled.matrix(2), &expect, 1e-14));
        for kind in [&rot, &scaled] {
            assert_eq!(kind.matrix(0), Mat::identity(2, 2));
            assert_eq!(kind.inverse_matrix(0), Mat::identity(2, 2));
        }
    }

    #[test]
    fn reflection_inverse_blocks_match_forward_up_to_scale() {
        let t = TangentTransform::BlockReflection {
            angles: vec![0.3, -1.1],
            scale: Scale::unit(),
        };
        assert_eq!(t.blocks(5, false), t.blocks(5, true));
    }

    #[test]
    fn transport_is_identity_for_same_position() {
        let t = TangentTransform::BlockRotation {
            angles: vec![0.2, 0.9],
            scale: Scale::new(0.4, ScaleMode::bounded()),
        };
        let v = [1.0, -2.0, 0.5, 3.0];
        let p = t.parallel_transport(6, 6, &v).unwrap();
        for (a, b) in p.iter().zip(v) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(t.parallel_transport(0, 1, &v[..3]).is_err());
    }

    #[test]
    fn metric_inner_dimension_checked() {
        let m = Metric::Scalar {
            scale: Scale::unit(),
            dim: 2,
        };
        assert_eq!(m.inner(3, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(m.inner(0, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn compatibility_residual_zero_on_diagonal() {
        let t = TangentTransform::BlockRotation {
            angles: vec![0.2],
            scale: Scale::new(0.4, ScaleMode::bounded()),
        };
        assert_eq!(
            compatibility_residual(&t.paired_metric(), &t, 4, 4).unwrap(),
            0.0
        );
        let wrong = Metric::Scalar {
            scale: Scale::unit(),
            dim: 4,
        };
        assert!(compatibility_residual(&wrong, &t, 0, 1).is_err());
    }
}
