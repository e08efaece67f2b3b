//! Multi-head self-attention with a pluggable position mechanism and the
//! locality-focusing path, which scales post-softmax weights by a Gaussian
//! of the distance between token positions.
//!
//! The free functions are plain reference kernels on `[L, d]` tensors; the
//! [`MultiHeadAttention`] layer builds the same computation on the tape for
//! batched training.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::positional::{Alignment, Layout, PositionConfig};
use crate::rng::{trunc_normal, Rng};
use crate::tensor::Tensor;

/// Added to the diagonal of `L L^T` so the learned metric stays definite.
pub const A_EPS: f64 = 1e-6;
pub const SIGMA0: f64 = 2.0;
pub const INIT_STD: f64 = 0.02;

/// Row-wise softmax of `[.., n]`.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("non-scalar");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention", format!("q {qs:?} vs k {ks:?}")));
    }
    let logits = q.matmul(&k.transpose_last()?)?;
    Ok(softmax_rows(&logits.map(|v| v / (qs[1] as f64).sqrt())))
}

pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let s = attention_weights(q, k)?;
    if v.ndim() != 2 || v.shape()[0] != k.shape()[0] {
        return Err(Error::shape(
            "attention",
            format!("k {:?} vs v {:?}", k.shape(), v.shape()),
        ));
    }
    s.matmul(v)
}

/// Numeric attenuation settings for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct Attenuation {
    /// Pre-softplus widths: one value shared by all queries, or one per query.
    pub sigma_raw: Vec<f64>,
    /// Lower-triangular factor of `A`: `[l00]` on sequences, `[l00, l10, l11]`
    /// on grids. `None` means `A = I`.
    pub factor: Option<Vec<f64>>,
}

impl Attenuation {
    pub fn shared(sigma: f64) -> Self {
        Attenuation {
            sigma_raw: vec![inverse_softplus(sigma)],
            factor: None,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(e^y - 1)`, so that `softplus(inverse_softplus(y)) = y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Entries `(A00, A01, A11)` of `L L^T + eps I`.
fn metric_entries(factor: &[f64]) -> (f64, f64, f64) {
    match factor {
        [l00] => (l00 * l00 + A_EPS, 0.0, 0.0),
        [l00, l10, l11] => (l00 * l00 + A_EPS, l00 * l10, l10 * l10 + l11 * l11 + A_EPS),
        _ => panic!("attenuation factor must have 1 or 3 entries"),
    }
}

/// `Omega[m, n] = exp(-(p_m - p_n)^T A (p_m - p_n) / (2 sigma_m^2))`.
pub fn attenuation_matrix(layout: Layout, params: &Attenuation) -> Result<Tensor> {
    let coords = layout.coordinates();
    let l = coords.len();
    if params.sigma_raw.len() != 1 && params.sigma_raw.len() != l {
        return Err(Error::shape(
            "attenuation_matrix",
            format!("{} widths for {l} tokens", params.sigma_raw.len()),
        ));
    }
    let want = match layout {
        Layout::Sequence { .. } => 1,
        Layout::Grid { .. } => 3,
    };
    if let Some(f) = &params.factor {
        if f.len() != want {
            return Err(Error::shape(
                "attenuation_matrix",
                format!("factor needs {want} entries, got {}", f.len()),
            ));
        }
    }
    let (a00, a01, a11) = params
        .factor
        .as_deref()
        .map_or((1.0, 0.0, 1.0), metric_entries);
    let mut out = Vec::with_capacity(l * l);
    for (m, &(xm, ym)) in coords.iter().enumerate() {
        let sigma = softplus(params.sigma_raw[if params.sigma_raw.len() == 1 { 0 } else { m }]);
        for &(xn, yn) in &coords {
            let (dx, dy) = (xm - xn, ym - yn);
            let d2 = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy;
            out.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Tensor::new(vec![l, l], out)
}

/// `(S ⊙ Omega) V`, optionally renormalizing the rows of `S ⊙ Omega`.
pub fn lf_attention(s: &Tensor, omega: &Tensor, v: &Tensor, renormalize: bool) -> Result<Tensor> {
    if s.shape() != omega.shape() || s.ndim() != 2 || v.ndim() != 2 || v.shape()[0] != s.shape()[1]
    {
        return Err(Error::shape(
            "lf_attention",
            format!(
                "S {:?}, Omega {:?}, V {:?}",
                s.shape(),
                omega.shape(),
                v.shape()
            ),
        ));
    }
    let n = s.shape()[1];
    let mut w: Vec<f64> = s
        .data()
        .iter()
        .zip(omega.data())
        .map(|(a, b)| a * b)
        .collect();
    if renormalize {
        for row in w.chunks_mut(n) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
    }
    Tensor::new(s.shape().to_vec(), w)?.matmul(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    /// One width per head.
    Shared,
    /// One width per head and query position.
    PerPosition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricMode {
    Identity,
    /// `A = L L^T + eps I` with `L` learned, starting at the identity.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfConfig {
    pub sigma_mode: SigmaMode,
    pub metric: MetricMode,
    pub sigma0: f64,
    pub renormalize: bool,
}

impl Default for LfConfig {
    fn default() -> Self {
        LfConfig {
            sigma_mode: SigmaMode::Shared,
            metric: MetricMode::Identity,
            sigma0: SIGMA0,
            renormalize: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub position: PositionConfig,
    pub lf: Option<LfConfig>,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self, layout: Layout) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let axes = layout.axis_positions().len();
        let per_axis = self.head_dim() / axes;
        let multiple = self.position.mechanism.channel_multiple();
        if self.position.mechanism.aligns()
            && (!self.head_dim().is_multiple_of(axes) || !per_axis.is_multiple_of(multiple))
        {
            return Err(Error::Config(format!(
                "{} needs the head width {} to split into {axes} axis part(s) divisible by {multiple}",
                self.position.mechanism,
                self.head_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LfParams {
    cfg: LfConfig,
    sigma_raw: ParamId,
    factor: Option<ParamId>,
}

/// Tape handles captured during a forward, for heatmap export.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// Post-softmax weights `[B, H, L, L]`.
    pub scores: Var,
    /// Attenuation `[H, L, L]`, when locality focusing is on.
    pub omega: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    cfg: AttentionConfig,
    layout: Layout,
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    alignment: Option<Alignment>,
    lf: Option<LfParams>,
}

pub(crate) fn linear_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.add(
        format!("{name}.weight"),
        ParamGroup::Weight,
        trunc_normal(rng, &[fan_in, fan_out], INIT_STD),
    )?;
    let b = store.add(
        format!("{name}.bias"),
        ParamGroup::Bias,
        Tensor::zeros(&[fan_out]),
    )?;
    Ok((w, b))
}

pub(crate) fn apply_linear(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    (w, b): (ParamId, ParamId),
) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    g.linear(x, wv, bv)
}

impl MultiHeadAttention {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        cfg: AttentionConfig,
        layout: Layout,
    ) -> Result<Self> {
        cfg.validate(layout)?;
        let d = cfg.d_model;
        let wq = linear_params(store, rng, &format!("{prefix}.q"), d, d)?;
        let wk = linear_params(store, rng, &format!("{prefix}.k"), d, d)?;
        let wv = linear_params(store, rng, &format!("{prefix}.v"), d, d)?;
        let wo = linear_params(store, rng, &format!("{prefix}.o"), d, d)?;
        let alignment = Alignment::register(
            store,
            &format!("{prefix}.pos"),
            cfg.position,
            cfg.heads,
            cfg.head_dim(),
            layout,
        )?;
        let lf = match cfg.lf {
            None => None,
            Some(lf) => {
                let h = cfg.heads;
                let shape: &[usize] = match lf.sigma_mode {
                    SigmaMode::Shared => &[h],
                    SigmaMode::PerPosition => &[h, layout.len()],
                };
                let sigma_raw = store.add(
                    format!("{prefix}.lf.sigma"),
                    ParamGroup::Sigma,
                    Tensor::full(shape, inverse_softplus(lf.sigma0)),
                )?;
                let factor = match lf.metric {
                    MetricMode::Identity => None,
                    MetricMode::Learned => {
                        let init: &[f64] = match layout {
                            Layout::Sequence { .. } => &[1.0],
                            Layout::Grid { .. } => &[1.0, 0.0, 1.0],
                        };
                        let t = Tensor::new(vec![h, init.len()], init.repeat(h))?;
                        Some(store.add(format!("{prefix}.lf.a_factor"), ParamGroup::AFactor, t)?)
                    }
                };
                Some(LfParams {
                    cfg: lf,
                    sigma_raw,
                    factor,
                })
            }
        };
        Ok(MultiHeadAttention {
            cfg,
            layout,
            wq,
            wk,
            wv,
            wo,
            alignment,
            lf,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn alignment(&self) -> Option<&Alignment> {
        self.alignment.as_ref()
    }

    /// Numeric attenuation parameters of head `head`, if LF is on.
    pub fn attenuation(&self, store: &ParamStore, head: usize) -> Option<Attenuation> {
        let lf = self.lf.as_ref()?;
        let row = |id: ParamId| {
            let v = store.value(id);
            let k = v.numel() / self.cfg.heads;
            v.data()[head * k..(head + 1) * k].to_vec()
        };
        Some(Attenuation {
            sigma_raw: row(lf.sigma_raw),
            factor: lf.factor.map(row),
        })
    }

    /// `[B, L, d_model] -> [B, H, L, d_head]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (b, l) = (g.shape(x)[0], g.shape(x)[1]);
        let x = g.reshape(x, &[b, l, self.cfg.heads, self.cfg.head_dim()])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    fn omega(&self, g: &mut Graph, store: &ParamStore, lf: &LfParams) -> Result<Var> {
        let coords = self.layout.coordinates();
        let l = coords.len();
        let h = self.cfg.heads;
        let table = |f: &dyn Fn((f64, f64), (f64, f64)) -> f64| -> Result<Tensor> {
            Tensor::new(
                vec![l, l],
                coords
                    .iter()
                    .flat_map(|&a| coords.iter().map(move |&b| f(a, b)))
                    .collect(),
            )
        };
        let dx2 = table(&|a, b| (a.0 - b.0).powi(2))?;
        let dy2 = table(&|a, b| (a.1 - b.1).powi(2))?;
        let dxy = table(&|a, b| (a.0 - b.0) * (a.1 - b.1))?;
        let quad = match lf.factor {
            None => {
                let mut t = dx2;
                t.add_assign(&dy2);
                g.constant(t)?
            }
            Some(id) => {
                let fv = g.param(store, id)?;
                let k = store.value(id).shape()[1];
                let entry = |g: &mut Graph, i: usize| -> Result<Var> {
                    let e = g.narrow(fv, 1, i, 1)?;
                    g.reshape(e, &[h, 1, 1])
                };
                let l00 = entry(g, 0)?;
                let a00 = g.mul(l00, l00)?;
                let a00 = g.shift(a00, A_EPS)?;
                let dx2 = g.constant(dx2)?;
                let mut quad = g.mul(a00, dx2)?;
                if k == 3 {
                    let l10 = entry(g, 1)?;
                    let l11 = entry(g, 2)?;
                    let a01 = g.mul(l00, l10)?;
                    let a01 = g.scale(a01, 2.0)?;
                    let s10 = g.mul(l10, l10)?;
                    let s11 = g.mul(l11, l11)?;
                    let a11 = g.add(s10, s11)?;
                    let a11 = g.shift(a11, A_EPS)?;
                    let dxy = g.constant(dxy)?;
                    let dy2 = g.constant(dy2)?;
                    let t01 = g.mul(a01, dxy)?;
                    let t11 = g.mul(a11, dy2)?;
                    quad = g.add(quad, t01)?;
                    quad = g.add(quad, t11)?;
                }
                quad
            }
        };
        let raw = g.param(store, lf.sigma_raw)?;
        let sigma = g.softplus(raw)?;
        let sigma = match lf.cfg.sigma_mode {
            SigmaMode::Shared => g.reshape(sigma, &[h, 1, 1])?,
            SigmaMode::PerPosition => g.reshape(sigma, &[h, l, 1])?,
        };
        let var = g.mul(sigma, sigma)?;
        let den = g.scale(var, 2.0)?;
        let ratio = g.div(quad, den)?;
        let neg = g.neg(ratio)?;
        g.exp(neg)
    }

    /// `x [B, L, d_model] -> [B, L, d_model]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.layout.len() || shape[2] != self.cfg.d_model {
            return Err(Error::shape(
                "attention",
                format!(
                    "expected [B, {}, {}], got {shape:?}",
                    self.layout.len(),
                    self.cfg.d_model
                ),
            ));
        }
        let q = apply_linear(g, store, x, self.wq)?;
        let k = apply_linear(g, store, x, self.wk)?;
        let v = apply_linear(g, store, x, self.wv)?;
        let mut q = self.split_heads(g, q)?;
        let mut k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        if let Some(al) = &self.alignment {
            q = al.apply(g, store, q)?;
            k = al.apply(g, store, k)?;
        }
        let kt = g.transpose_last(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (self.cfg.head_dim() as f64).sqrt())?;
        let scores = g.softmax(logits)?;
        let mut omega = None;
        let weights = match &self.lf {
            None => scores,
            Some(lf) => {
                let om = self.omega(g, store, lf)?;
                omega = Some(om);
                let w = g.mul(scores, om)?;
                if lf.cfg.renormalize {
                    let z = g.sum_axis(w, 3, true)?;
                    g.div(w, z)?
                } else {
                    w
                }
            }
        };
        if let Some(t) = trace {
            t.push(AttentionTrace { scores, omega });
        }
        let out = g.matmul(weights, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &shape)?;
        apply_linear(g, store, out, self.wo)
    }
}
