//! Position mechanisms applied to queries and keys: none, additive
//! sinusoidal tables, rotary embeddings and tangent-space alignment.
//!
//! Alignment uses the two-sided form: row `m` of both queries and keys is
//! replaced by `T_{p_m}^{-1} x_m`, after which a plain dot product gives the
//! metric score between positions. Image grids are handled axially, with the
//! first half of each head's channels aligned along x and the second half
//! along y.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    General2DBlock, Metric, Scale, ScaleMode, ScaleSchedule, SkewGenerator, TangentTransform,
    TransformKind,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FREQ_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    NoPos,
    Sinusoidal,
    Rope,
    Riemann(TransformKind),
}

impl Mechanism {
    pub const ALL: [Mechanism; 8] = [
        Mechanism::NoPos,
        Mechanism::Sinusoidal,
        Mechanism::Rope,
        Mechanism::Riemann(TransformKind::BlockRotation),
        Mechanism::Riemann(TransformKind::BlockReflection),
        Mechanism::Riemann(TransformKind::Mixed4x4),
        Mechanism::Riemann(TransformKind::General2D),
        Mechanism::Riemann(TransformKind::DenseSkewExp),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::NoPos => "nopos",
            Mechanism::Sinusoidal => "sinusoidal",
            Mechanism::Rope => "rope",
            Mechanism::Riemann(TransformKind::BlockRotation) => "riemann",
            Mechanism::Riemann(TransformKind::BlockReflection) => "riemann-reflection",
            Mechanism::Riemann(TransformKind::Mixed4x4) => "riemann-mixed",
            Mechanism::Riemann(TransformKind::General2D) => "riemann-general",
            Mechanism::Riemann(TransformKind::DenseSkewExp) => "riemann-dense",
        }
    }

    /// Whether queries and keys are transformed per position.
    pub fn aligns(self) -> bool {
        matches!(self, Mechanism::Rope | Mechanism::Riemann(_))
    }

    /// Channels per axis must be a multiple of this.
    pub fn channel_multiple(self) -> usize {
        match self {
            Mechanism::Riemann(TransformKind::Mixed4x4) => 4,
            Mechanism::Rope | Mechanism::Riemann(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "riemann-rotation" {
            return Ok(Mechanism::Riemann(TransformKind::BlockRotation));
        }
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mechanism::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown mechanism {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Token arrangement: a 1-D sequence or a row-major patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Sequence { len: usize },
    Grid { rows: usize, cols: usize },
}

impl Layout {
    pub fn len(self) -> usize {
        match self {
            Layout::Sequence { len } => len,
            Layout::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Position lists, one per axis: `[t]` for sequences, `[x, y]` for grids.
    pub fn axis_positions(self) -> Vec<Vec<usize>> {
        match self {
            Layout::Sequence { len } => vec![(0..len).collect()],
            Layout::Grid { rows, cols } => {
                let (x, y) = axial_positions_2d(rows, cols);
                vec![x, y]
            }
        }
    }

    /// Coordinates used by the attenuation kernel, `(x, y)` per token.
    pub fn coordinates(self) -> Vec<(f64, f64)> {
        match self {
            Layout::Sequence { len } => (0..len).map(|t| (t as f64, 0.0)).collect(),
            Layout::Grid { rows, cols } => (0..rows * cols)
                .map(|i| {
                    let p = GridPosition::from_index(i, cols);
                    (p.col as f64, p.row as f64)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPosition {
    pub row: usize,
    pub col: usize,
}

impl GridPosition {
    pub fn from_index(index: usize, cols: usize) -> Self {
        GridPosition {
            row: index / cols,
            col: index % cols,
        }
    }
}

/// Per-token `(x, y)` positions for a row-major `rows x cols` grid.
pub fn axial_positions_2d(rows: usize, cols: usize) -> (Vec<usize>, Vec<usize>) {
    (0..rows * cols)
        .map(|i| {
            let p = GridPosition::from_index(i, cols);
            (p.col, p.row)
        })
        .unzip()
}

/// `table[m, 2j] = sin(m f_j)`, `table[m, 2j+1] = cos(m f_j)` with
/// `f_j = 10000^{-2j/D}`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs an even dimension, got {dim}"
        )));
    }
    Tensor::new(
        vec![len, dim],
        (0..len)
            .flat_map(|m| {
                (0..dim).map(move |i| {
                    let j = i / 2;
                    let arg = m as f64 * FREQ_BASE.powf(-2.0 * j as f64 / dim as f64);
                    if i % 2 == 0 {
                        arg.sin()
                    } else {
                        arg.cos()
                    }
                })
            })
            .collect(),
    )
}

/// `theta_j = 10000^{-2j/D}` for `j < D/2`.
pub fn default_angles(dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .map(|j| FREQ_BASE.powf(-2.0 * j as f64 / dim as f64))
        .collect()
}

fn check_rows(op: &'static str, x: &Tensor, positions: &[usize], dim: usize) -> Result<usize> {
    match x.shape() {
        [l, d] if *l == positions.len() && *d == dim => Ok(*l),
        s => Err(Error::shape(
            op,
            format!("expected [{}, {dim}], got {s:?}", positions.len()),
        )),
    }
}

/// Replaces row `m` of `x [L, D]` with `T_{p_m}^{-1} x_m`, block by block.
pub fn apply_tangent_alignment(
    x: &Tensor,
    positions: &[usize],
    t: &TangentTransform,
) -> Result<Tensor> {
    let d = t.dim();
    check_rows("apply_tangent_alignment", x, positions, d)?;
    let mut out = Vec::with_capacity(x.numel());
    for (row, &p) in x.rows().zip(positions) {
        match t.blocks(p, true) {
            Some(blocks) => {
                for (b, pair) in blocks.iter().zip(row.chunks(2)) {
                    out.push(b[(0, 0)] * pair[0] + b[(0, 1)] * pair[1]);
                    out.push(b[(1, 0)] * pair[0] + b[(1, 1)] * pair[1]);
                }
            }
            None => {
                let inv = t.inverse_matrix(p);
                out.extend((0..d).map(|i| (0..d).map(|j| inv[(i, j)] * row[j]).sum::<f64>()));
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Rotary embedding: each channel pair of row `m` rotated by `R(p_m theta_j)`.
pub fn rope(x: &Tensor, positions: &[usize], angles: &[f64]) -> Result<Tensor> {
    check_rows("rope", x, positions, 2 * angles.len())?;
    let mut out = Vec::with_capacity(x.numel());
    for (row, &p) in x.rows().zip(positions) {
        for (pair, &theta) in row.chunks(2).zip(angles) {
            let (s, c) = (p as f64 * theta).sin_cos();
            out.push(c * pair[0] - s * pair[1]);
            out.push(s * pair[0] + c * pair[1]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Axial alignment: channels `[0, D/2)` by `tx` at x-positions, `[D/2, D)`
/// by `ty` at y-positions.
pub fn apply_axial_2d(
    x: &Tensor,
    rows: usize,
    cols: usize,
    tx: &TangentTransform,
    ty: &TangentTransform,
) -> Result<Tensor> {
    let d = match x.shape() {
        [l, d] if *l == rows * cols => *d,
        s => {
            return Err(Error::shape(
                "apply_axial_2d",
                format!("{s:?} for a {rows}x{cols} grid"),
            ))
        }
    };
    if d % 4 != 0 || tx.dim() != d / 2 || ty.dim() != d / 2 {
        return Err(Error::shape(
            "apply_axial_2d",
            format!(
                "width {d} must split into halves matching transforms {} and {}",
                tx.dim(),
                ty.dim()
            ),
        ));
    }
    let (px, py) = axial_positions_2d(rows, cols);
    let left = apply_tangent_alignment(&crate::tensor::narrow(x, 1, 0, d / 2)?, &px, tx)?;
    let right = apply_tangent_alignment(&crate::tensor::narrow(x, 1, d / 2, d / 2)?, &py, ty)?;
    crate::tensor::concat(&[&left, &right], 1)
}

/// The one-sided score `q^T M_m T_m T_n^{-1} k`, which equals the dot
/// product of the aligned vectors for a compatible transform/metric pair.
pub fn one_sided_score(
    metric: &Metric,
    t: &TangentTransform,
    m: usize,
    n: usize,
    q: &[f64],
    k: &[f64],
) -> Result<f64> {
    let pk = t.parallel_transport(n, m, k)?;
    metric.inner(m, q, &pk)
}

/// Raw logits `q k^T` for `q [L, D]`, `k [L', D]`.
pub fn score_matrix(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    q.matmul(&k.transpose_last()?)
}

/// Position mechanism settings shared by every layer of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionConfig {
    pub mechanism: Mechanism,
    pub scale_mode: ScaleMode,
    pub schedule: ScaleSchedule,
    pub learn_theta: bool,
}

impl PositionConfig {
    pub fn new(mechanism: Mechanism) -> Self {
        PositionConfig {
            mechanism,
            scale_mode: ScaleMode::bounded(),
            schedule: ScaleSchedule::Linear,
            learn_theta: true,
        }
    }
}

#[derive(Clone, Debug)]
enum AxisKind {
    /// Fixed rotary angles.
    Rope {
        angles: Vec<f64>,
    },
    /// Rotation, reflection and mixed blocks share one parameterization.
    Blocks {
        kind: TransformKind,
        theta: Angles,
        w: ParamId,
    },
    General {
        theta: Angles,
        w1: ParamId,
        w2: ParamId,
    },
    Dense {
        skew: ParamId,
        w: ParamId,
    },
}

#[derive(Clone, Debug)]
enum Angles {
    Learned(ParamId),
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Axis {
    kind: AxisKind,
    positions: Vec<usize>,
    /// Channel offset and width within a head.
    start: usize,
    dim: usize,
}

/// Learnable per-head alignment for one attention layer.
///
/// Each head owns its own angles and scale parameters; on grids each axis
/// has a separate set.
#[derive(Clone, Debug)]
pub struct Alignment {
    cfg: PositionConfig,
    heads: usize,
    axes: Vec<Axis>,
}

impl Alignment {
    /// Registers parameters under `prefix`. Returns `None` for mechanisms
    /// that leave queries and keys untouched.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: PositionConfig,
        heads: usize,
        head_dim: usize,
        layout: Layout,
    ) -> Result<Option<Self>> {
        if !cfg.mechanism.aligns() {
            return Ok(None);
        }
        let positions = layout.axis_positions();
        let n_axes = positions.len();
        let dim = head_dim / n_axes;
        let multiple = cfg.mechanism.channel_multiple();
        if !head_dim.is_multiple_of(n_axes) || !dim.is_multiple_of(multiple) || dim == 0 {
            return Err(Error::Config(format!(
                "{} needs head width divisible by {} on a {n_axes}-axis layout, got {head_dim}",
                cfg.mechanism,
                n_axes * multiple
            )));
        }
        let suffixes: &[&str] = if n_axes == 1 { &[""] } else { &["_x", "_y"] };
        let nb = dim / 2;
        let mut axes = Vec::with_capacity(n_axes);
        for (ai, pos) in positions.into_iter().enumerate() {
            let sfx = suffixes[ai];
            let angles = |store: &mut ParamStore| -> Result<Angles> {
                let init = default_angles(dim);
                if cfg.learn_theta {
                    let t = Tensor::new(vec![heads, nb], init.repeat(heads))?;
                    Ok(Angles::Learned(store.add(
                        format!("{prefix}.theta{sfx}"),
                        ParamGroup::Theta,
                        t,
                    )?))
                } else {
                    Ok(Angles::Fixed(init))
                }
            };
            let kind = match cfg.mechanism {
                Mechanism::Rope => AxisKind::Rope {
                    angles: default_angles(dim),
                },
                Mechanism::Riemann(TransformKind::General2D) => {
                    let theta = angles(store)?;
                    let w1 = store.add(
                        format!("{prefix}.w1{sfx}"),
                        ParamGroup::ScaleW,
                        Tensor::zeros(&[heads, nb]),
                    )?;
                    let w2 = store.add(
                        format!("{prefix}.w2{sfx}"),
                        ParamGroup::ScaleW,
                        Tensor::zeros(&[heads, nb]),
                    )?;
                    AxisKind::General { theta, w1, w2 }
                }
                Mechanism::Riemann(TransformKind::DenseSkewExp) => {
                    let p = dim * (dim - 1) / 2;
                    let skew = store.add(
                        format!("{prefix}.skew{sfx}"),
                        ParamGroup::Skew,
                        Tensor::zeros(&[heads, p]),
                    )?;
                    let w = store.add(
                        format!("{prefix}.w{sfx}"),
                        ParamGroup::ScaleW,
                        Tensor::zeros(&[heads, 1]),
                    )?;
                    AxisKind::Dense { skew, w }
                }
                Mechanism::Riemann(kind) => {
                    let theta = angles(store)?;
                    let w = store.add(
                        format!("{prefix}.w{sfx}"),
                        ParamGroup::ScaleW,
                        Tensor::zeros(&[heads, 1]),
                    )?;
                    AxisKind::Blocks { kind, theta, w }
                }
                Mechanism::NoPos | Mechanism::Sinusoidal => unreachable!("non-aligning mechanism"),
            };
            axes.push(Axis {
                kind,
                positions: pos,
                start: ai * dim,
                dim,
            });
        }
        Ok(Some(Alignment { cfg, heads, axes }))
    }

    /// Aligns `x [B, H, L, d_head]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.axes.len());
        for axis in &self.axes {
            let xa = if self.axes.len() == 1 {
                x
            } else {
                g.narrow(x, 3, axis.start, axis.dim)?
            };
            parts.push(self.apply_axis(g, store, axis, xa)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 3)
        }
    }

    fn constant_col(g: &mut Graph, values: impl Iterator<Item = f64>) -> Result<Var> {
        let v: Vec<f64> = values.collect();
        g.constant(Tensor::new(vec![v.len(), 1], v)?)
    }

    /// `ln s` for raw `w`, same shape.
    fn ln_scale(&self, g: &mut Graph, w: Var) -> Result<Var> {
        match self.cfg.scale_mode {
            ScaleMode::Free => Ok(w),
            ScaleMode::Bounded { alpha } => {
                let z = g.neg(w)?;
                let z = g.shift(z, alpha.ln())?;
                let sp = g.softplus(z)?;
                g.neg(sp)
            }
        }
    }

    /// `s^{e(p)/2}` as `[H, L, k]` where `w` is `[H, k]`.
    fn half_scale(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        w: ParamId,
        axis: &Axis,
    ) -> Result<Var> {
        let wv = g.param(store, w)?;
        let k = store.value(w).shape()[1];
        let lns = self.ln_scale(g, wv)?;
        let lns = g.reshape(lns, &[self.heads, 1, k])?;
        let sched = self.cfg.schedule;
        let e = Self::constant_col(g, axis.positions.iter().map(|&p| 0.5 * sched.exponent(p)))?;
        let t = g.mul(lns, e)?;
        g.exp(t)
    }

    /// `theta_j p_m` as `[H, L, nb]` (or `[L, nb]` for fixed angles).
    fn phases(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        theta: &Angles,
        axis: &Axis,
    ) -> Result<Var> {
        let nb = axis.dim / 2;
        let pos = Self::constant_col(g, axis.positions.iter().map(|&p| p as f64))?;
        let th = match theta {
            Angles::Learned(id) => {
                let t = g.param(store, *id)?;
                g.reshape(t, &[self.heads, 1, nb])?
            }
            Angles::Fixed(a) => {
                let t = Tensor::new(vec![self.heads, 1, nb], a.repeat(self.heads))?;
                g.constant(t)?
            }
        };
        g.mul(th, pos)
    }

    fn apply_axis(&self, g: &mut Graph, store: &ParamStore, axis: &Axis, x: Var) -> Result<Var> {
        let nb = axis.dim / 2;
        match &axis.kind {
            AxisKind::Rope { angles } => {
                // forward rotation R(p theta): [[c, -s], [s, c]]
                let l = axis.positions.len();
                let mut tabs = [vec![], vec![], vec![], vec![]];
                for &p in &axis.positions {
                    for &t in angles {
                        let (s, c) = (p as f64 * t).sin_cos();
                        tabs[0].push(c);
                        tabs[1].push(-s);
                        tabs[2].push(s);
                        tabs[3].push(c);
                    }
                }
                let mut vars = Vec::with_capacity(4);
                for t in tabs {
                    vars.push(g.constant(Tensor::new(vec![l, nb], t)?)?);
                }
                g.pair_transform(x, [vars[0], vars[1], vars[2], vars[3]])
            }
            AxisKind::Blocks { kind, theta, w } => {
                // T^{-1} blocks: rotation f[[c, s], [-s, c]] at angle phi,
                // reflection f[[c, s], [s, -c]] at angle 2 phi
                let is_reflection = |j: usize| match kind {
                    TransformKind::BlockReflection => true,
                    TransformKind::Mixed4x4 => j % 2 == 1,
                    _ => false,
                };
                let mult: Vec<f64> = (0..nb)
                    .map(|j| if is_reflection(j) { 2.0 } else { 1.0 })
                    .collect();
                let csign: Vec<f64> = (0..nb)
                    .map(|j| if is_reflection(j) { 1.0 } else { -1.0 })
                    .collect();
                let dsign: Vec<f64> = (0..nb)
                    .map(|j| if is_reflection(j) { -1.0 } else { 1.0 })
                    .collect();
                let phi = self.phases(g, store, theta, axis)?;
                let mult = g.constant(Tensor::from_vec(mult))?;
                let phi = g.mul(phi, mult)?;
                let f = self.half_scale(g, store, *w, axis)?;
                let cos = g.cos(phi)?;
                let sin = g.sin(phi)?;
                let a = g.mul(f, cos)?;
                let b = g.mul(f, sin)?;
                let cs = g.constant(Tensor::from_vec(csign))?;
                let ds = g.constant(Tensor::from_vec(dsign))?;
                let c = g.mul(b, cs)?;
                let d = g.mul(a, ds)?;
                g.pair_transform(x, [a, b, c, d])
            }
            AxisKind::General { theta, w1, w2 } => {
                // S^{e/2} R(p theta) = [[f1 c, -f1 s], [f2 s, f2 c]]
                let phi = self.phases(g, store, theta, axis)?;
                let f1 = self.half_scale(g, store, *w1, axis)?;
                let f2 = self.half_scale(g, store, *w2, axis)?;
                let cos = g.cos(phi)?;
                let sin = g.sin(phi)?;
                let a = g.mul(f1, cos)?;
                let b = g.mul(f1, sin)?;
                let b = g.neg(b)?;
                let c = g.mul(f2, sin)?;
                let d = g.mul(f2, cos)?;
                g.pair_transform(x, [a, b, c, d])
            }
            AxisKind::Dense { skew, w } => {
                // T_p^{-1} = s^{e(p)/2} exp(-X)^p
                let n = axis.dim;
                let h = self.heads;
                let sv = g.param(store, *skew)?;
                let xm = g.skew_from_upper(sv, n)?;
                let neg = g.neg(xm)?;
                let step = g.expm(neg)?;
                let max_p = axis.positions.iter().copied().max().unwrap_or(0);
                let eye = Tensor::new(vec![h, n, n], Tensor::eye(n).data().repeat(h))?;
                let mut power = g.constant(eye)?;
                let mut powers = Vec::with_capacity(max_p + 1);
                for p in 0..=max_p {
                    if p > 0 {
                        power = g.matmul(power, step)?;
                    }
                    powers.push(g.reshape(power, &[h, 1, n, n])?);
                }
                let stacked = g.concat(&powers, 1)?;
                let mats = g.index_select(stacked, 1, &axis.positions)?;
                let f = self.half_scale(g, store, *w, axis)?;
                let f = g.reshape(f, &[h, axis.positions.len(), 1, 1])?;
                let mats = g.mul(mats, f)?;
                g.apply_matrices(x, mats)
            }
        }
    }

    /// The numeric transform currently realized by head `head` on axis `axis`.
    pub fn transform(&self, store: &ParamStore, head: usize, axis: usize) -> TangentTransform {
        let ax = &self.axes[axis];
        let nb = ax.dim / 2;
        let row = |id: ParamId| -> Vec<f64> {
            let v = store.value(id);
            let k = v.shape()[1];
            v.data()[head * k..(head + 1) * k].to_vec()
        };
        let angles = |theta: &Angles| match theta {
            Angles::Learned(id) => row(*id),
            Angles::Fixed(a) => a.clone(),
        };
        let scale = |w: ParamId| Scale {
            w: row(w)[0],
            mode: self.cfg.scale_mode,
            schedule: self.cfg.schedule,
        };
        match &ax.kind {
            AxisKind::Rope { angles } => TangentTransform::BlockRotation {
                angles: angles.iter().map(|a| -a).collect(),
                scale: Scale::unit(),
            },
            AxisKind::Blocks { kind, theta, w } => {
                let a = angles(theta);
                match kind {
                    TransformKind::BlockRotation => TangentTransform::BlockRotation {
                        angles: a,
                        scale: scale(*w),
                    },
                    TransformKind::BlockReflection => TangentTransform::BlockReflection {
                        angles: a,
                        scale: scale(*w),
                    },
                    _ => TangentTransform::Mixed4x4 {
                        angles: a.chunks(2).map(|p| (p[0], p[1])).collect(),
                        scale: scale(*w),
                    },
                }
            }
            AxisKind::General { theta, w1, w2 } => {
                let (a, w1, w2) = (angles(theta), row(*w1), row(*w2));
                TangentTransform::General2D {
                    blocks: (0..nb)
                        .map(|j| General2DBlock {
                            w1: w1[j],
                            w2: w2[j],
                            theta: a[j],
                        })
                        .collect(),
                    mode: self.cfg.scale_mode,
                    schedule: self.cfg.schedule,
                }
            }
            AxisKind::Dense { skew, w } => TangentTransform::DenseSkewExp {
                generator: SkewGenerator::new(ax.dim, row(*skew))
                    .expect("registered with a valid size"),
                scale: scale(*w),
            },
        }
    }

    pub fn num_axes(&self) -> usize {
        self.axes.len()
    }

    pub fn axis_positions(&self, axis: usize) -> &[usize] {
        &self.axes[axis].positions
    }
}
