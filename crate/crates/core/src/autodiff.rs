//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and whatever the backward rule needs. Nodes are appended in evaluation
//! order, so the tape index is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    self, broadcast_binary, gemm, matmul_dims, split_axis, sum_to_shape, BatchMode, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied unary op: `(grad_out, input, output) -> grad_in`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

enum Op {
    Constant,
    Param(ParamId),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    PairTransform {
        x: Var,
        coeffs: [Var; 4],
    },
    ApplyMatrices {
        x: Var,
        mats: Var,
    },
    SkewFromUpper {
        v: Var,
        n: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Custom {
        x: Var,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Powf(..) => "pow",
            Op::Sqrt(_) => "sqrt",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Softplus(_) => "softplus",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::PairTransform { .. } => "pair_transform",
            Op::ApplyMatrices { .. } => "apply_matrices",
            Op::SkewFromUpper { .. } => "skew_from_upper",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Powf(x, _)
            | Op::Sqrt(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Softplus(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Custom { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::PairTransform { x, coeffs } => {
                let mut p = vec![*x];
                p.extend_from_slice(coeffs);
                p
            }
            Op::ApplyMatrices { x, mats } => vec![*x, *mats],
            Op::SkewFromUpper { v, .. } => vec![*v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a parameter's current value as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(Op::Param(id), store.value(id).clone())
    }

    // -- elementwise --------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        make: fn(Var, Var) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = broadcast_binary(name, self.value(a), self.value(b), f)?;
        self.push(make(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: "non-positive argument".into(),
            });
        }
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "pow",
                detail: format!("negative base with non-integer exponent {p}"),
            });
        }
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: "negative argument".into(),
            });
        }
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), gelu)
    }

    // -- reductions and normalisation ---------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(Op::Softmax(x), value)
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain/bias must be [{d}], got {:?}/{:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let value = Tensor::from_parts(shape.clone(), out);
        let xhat = Tensor::from_parts(shape, xhat);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis; `keepdim` keeps it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} of {:?}", xv.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data()[(o * len + l) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        self.push(Op::SumAxis { x, axis }, Tensor::from_parts(shape, out))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[b, c] = lv.shape() else {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [B, C], got {:?}", lv.shape()),
            ));
        };
        if labels.len() != b || labels.iter().any(|&y| y >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {b}x{c} logits", labels.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let probs = Tensor::from_parts(vec![b, c], probs);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss / b as f64),
        )
    }

    // -- linear algebra -----------------------------------------------------

    /// Matrix product over the last two axes with batch broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul(a, b), value)
    }

    /// `x · w + b` with `w [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Matrix exponential of each `[.., n, n]` matrix by scaling-and-squaring
    /// around a degree-18 Taylor polynomial.
    pub fn expm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = match shape.as_slice() {
            [.., a, b] if a == b => *a,
            _ => {
                return Err(Error::shape(
                    "expm",
                    format!("square matrices required, got {shape:?}"),
                ))
            }
        };
        const DEGREE: usize = 18;
        let norm = self
            .value(x)
            .data()
            .chunks(n * n)
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let eye = self.constant(Tensor::eye(n))?;
        let a = self.scale(x, 0.5f64.powi(squarings as i32))?;
        let mut p = self.scale(a, 1.0 / DEGREE as f64)?;
        p = self.add(p, eye)?;
        for k in (1..DEGREE).rev() {
            let ap = self.matmul(a, p)?;
            let ap = self.scale(ap, 1.0 / k as f64)?;
            p = self.add(ap, eye)?;
        }
        for _ in 0..squarings {
            p = self.matmul(p, p)?;
        }
        Ok(p)
    }

    // -- layout -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), value)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = tensor::permute(self.value(x), axes)?;
        self.push(
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            value,
        )
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).ndim();
        if n < 2 {
            return Err(Error::shape("transpose", format!("rank {n} < 2")));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(x, &axes)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = tensor::narrow(self.value(x), axis, start, len)?;
        self.push(Op::Narrow { x, axis, start }, value)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&tensors, axis)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        )
    }

    /// Gathers slices `index[j]` of `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || index.is_empty() || index.iter().any(|&i| i >= xv.shape()[axis]) {
            return Err(Error::shape(
                "index_select",
                format!("bad index on axis {axis} of {:?}", xv.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                data.extend_from_slice(&xv.data()[(o * len + i) * inner..][..inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = index.len();
        self.push(
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
            Tensor::from_parts(shape, data),
        )
    }

    /// Builds skew-symmetric `[.., n, n]` matrices from their strict upper
    /// triangles `[.., n(n-1)/2]`, stored row by row.
    pub fn skew_from_upper(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        let p = n * n.saturating_sub(1) / 2;
        if vv.shape().last() != Some(&p) || n < 2 {
            return Err(Error::shape(
                "skew_from_upper",
                format!("need trailing extent {p} for n={n}, got {:?}", vv.shape()),
            ));
        }
        let batch = vv.numel() / p;
        let mut data = vec![0.0; batch * n * n];
        for (bi, src) in vv.data().chunks(p).enumerate() {
            let m = &mut data[bi * n * n..][..n * n];
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = src[k];
                    m[j * n + i] = -src[k];
                    k += 1;
                }
            }
        }
        let mut shape = vv.shape().to_vec();
        shape.pop();
        shape.extend([n, n]);
        self.push(Op::SkewFromUpper { v, n }, Tensor::from_parts(shape, data))
    }

    // -- positional kernels -------------------------------------------------

    /// Applies a 2×2 matrix `[[a, b], [c, d]]` to each consecutive channel pair.
    ///
    /// `x` is `[.., T.., D]`; every coefficient table is `[T.., D/2]` and is
    /// shared across the leading axes of `x` that it does not cover.
    pub fn pair_transform(&mut self, x: Var, coeffs: [Var; 4]) -> Result<Var> {
        let xv = self.value(x);
        let ts = self.shape(coeffs[0]).to_vec();
        let valid = coeffs.iter().all(|&c| self.shape(c) == ts.as_slice())
            && !ts.is_empty()
            && xv.shape().last() == Some(&(2 * ts[ts.len() - 1]))
            && ts.len() <= xv.ndim()
            && xv.shape()[xv.ndim() - ts.len()..xv.ndim() - 1] == ts[..ts.len() - 1];
        if !valid {
            return Err(Error::shape(
                "pair_transform",
                format!("tables {ts:?} do not fit input {:?}", xv.shape()),
            ));
        }
        let [a, b, c, d] = coeffs.map(|v| self.value(v).data());
        let blocks = a.len();
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(2 * blocks).zip(out.chunks_mut(2 * blocks)) {
            for i in 0..blocks {
                let (x0, x1) = (src[2 * i], src[2 * i + 1]);
                dst[2 * i] = a[i] * x0 + b[i] * x1;
                dst[2 * i + 1] = c[i] * x0 + d[i] * x1;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(Op::PairTransform { x, coeffs }, value)
    }

    /// `y_t = M_t x_t` for `x [.., T.., n]` and `mats [T.., n, n]`.
    pub fn apply_matrices(&mut self, x: Var, mats: Var) -> Result<Var> {
        let xv = self.value(x);
        let mv = self.value(mats);
        let (xs, ms) = (xv.shape(), mv.shape());
        let valid = ms.len() >= 2
            && xs.len() >= ms.len() - 1
            && ms[ms.len() - 1] == ms[ms.len() - 2]
            && xs.last() == ms.last()
            && xs[xs.len() - (ms.len() - 1)..] == ms[..ms.len() - 1];
        if !valid {
            return Err(Error::shape(
                "apply_matrices",
                format!("matrices {ms:?} do not fit input {xs:?}"),
            ));
        }
        let n = ms[ms.len() - 1];
        let count = mv.numel() / (n * n);
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(count * n).zip(out.chunks_mut(count * n)) {
            for t in 0..count {
                let m = &mv.data()[t * n * n..][..n * n];
                let xin = &src[t * n..][..n];
                for (i, y) in dst[t * n..][..n].iter_mut().enumerate() {
                    *y = m[i * n..][..n].iter().zip(xin).map(|(p, q)| p * q).sum();
                }
            }
        }
        let value = Tensor::from_parts(xs.to_vec(), out);
        self.push(Op::ApplyMatrices { x, mats }, value)
    }

    /// A unary op with a caller-supplied backward rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Result<Var> {
        let value = forward(self.value(x));
        self.push(
            Op::Custom {
                x,
                backward: Box::new(backward),
            },
            value,
        )
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in self.node_backward(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds every parameter leaf's adjoint into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.get(Var(i)) {
                    store.get_mut(id).grad.add_assign(g);
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let y = &node.value;
        let map_x = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let xv = self.value(x);
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect();
            Tensor::from_parts(xv.shape().to_vec(), data)
        };
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g, self.shape(*a))),
                (*b, sum_to_shape(g, self.shape(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g, self.shape(*a))),
                (*b, sum_to_shape(g, self.shape(*b)).map(|v| -v)),
            ],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.needs(*a) {
                    let ga = broadcast_binary("mul", g, self.value(*b), |p, q| p * q)
                        .expect("shapes recorded");
                    out.push((*a, sum_to_shape(&ga, self.shape(*a))));
                }
                if self.needs(*b) {
                    let gb = broadcast_binary("mul", g, self.value(*a), |p, q| p * q)
                        .expect("shapes recorded");
                    out.push((*b, sum_to_shape(&gb, self.shape(*b))));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.needs(*a) {
                    let ga = broadcast_binary("div", g, self.value(*b), |p, q| p / q)
                        .expect("shapes recorded");
                    out.push((*a, sum_to_shape(&ga, self.shape(*a))));
                }
                if self.needs(*b) {
                    let gy = broadcast_binary("mul", g, y, |p, q| -p * q).expect("shapes recorded");
                    let gb = broadcast_binary("div", &gy, self.value(*b), |p, q| p / q)
                        .expect("shapes recorded");
                    out.push((*b, sum_to_shape(&gb, self.shape(*b))));
                }
                out
            }
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Shift(x) => vec![(*x, g.clone())],
            Op::Exp(x) => vec![(*x, map_x(*x, &|gi, _, yi| gi * yi))],
            Op::Ln(x) => vec![(*x, map_x(*x, &|gi, xi, _| gi / xi))],
            Op::Powf(x, p) => {
                let p = *p;
                vec![(*x, map_x(*x, &|gi, xi, _| gi * p * xi.powf(p - 1.0)))]
            }
            Op::Sqrt(x) => vec![(*x, map_x(*x, &|gi, _, yi| 0.5 * gi / yi))],
            Op::Sin(x) => vec![(*x, map_x(*x, &|gi, xi, _| gi * xi.cos()))],
            Op::Cos(x) => vec![(*x, map_x(*x, &|gi, xi, _| -gi * xi.sin()))],
            Op::Softplus(x) => vec![(*x, map_x(*x, &|gi, xi, _| gi * sigmoid(xi)))],
            Op::Gelu(x) => vec![(*x, map_x(*x, &|gi, xi, _| gi * gelu_grad(xi)))],
            Op::Softmax(x) => {
                let cols = *y.shape().last().expect("softmax output has an axis");
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *y.shape().last().expect("layer_norm output has an axis");
                let gamma = self.value(*gain).data();
                let mut dx = Vec::with_capacity(y.numel());
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for ((gr, hr), &r) in g.data().chunks(d).zip(xhat.data().chunks(d)).zip(rstd) {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    dx.extend((0..d).map(|j| r * (gr[j] * gamma[j] - mean_dh - hr[j] * mean_dh_h)));
                }
                vec![
                    (*x, Tensor::from_parts(y.shape().to_vec(), dx)),
                    (*gain, Tensor::from_parts(vec![d], dgain)),
                    (*bias, Tensor::from_parts(vec![d], dbias)),
                ]
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(self.shape(*x), gv))]
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split_axis(xs, *axis);
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let row = &g.data()[o * inner..][..inner];
                    for _ in 0..len {
                        dx.extend_from_slice(row);
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), dx))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len() as f64;
                let c = probs.shape()[1];
                let mut d = probs.data().to_vec();
                for (row, &lab) in d.chunks_mut(c).zip(labels) {
                    row[lab] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), d))]
            }
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, g),
            Op::Reshape(x) => vec![(
                *x,
                Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec()),
            )],
            Op::Permute { x, axes } => {
                let inv = tensor::inverse_permutation(axes);
                vec![(*x, tensor::permute(g, &inv).expect("valid permutation"))]
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), dx))]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    out.push((
                        p,
                        tensor::narrow(g, *axis, start, len).expect("recorded slice"),
                    ));
                    start += len;
                }
                out
            }
            Op::IndexSelect { x, axis, index } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split_axis(xs, *axis);
                let mut dx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    for (j, &i) in index.iter().enumerate() {
                        let src = &g.data()[(o * index.len() + j) * inner..][..inner];
                        for (acc, v) in dx[(o * len + i) * inner..][..inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), dx))]
            }
            Op::PairTransform { x, coeffs } => {
                let [a, b, c, d] = coeffs.map(|v| self.value(v).data());
                let xv = self.value(*x);
                let blocks = a.len();
                let mut dx = vec![0.0; xv.numel()];
                let mut dc = [
                    vec![0.0; blocks],
                    vec![0.0; blocks],
                    vec![0.0; blocks],
                    vec![0.0; blocks],
                ];
                for ((src, gr), dst) in xv
                    .data()
                    .chunks(2 * blocks)
                    .zip(g.data().chunks(2 * blocks))
                    .zip(dx.chunks_mut(2 * blocks))
                {
                    for i in 0..blocks {
                        let (x0, x1) = (src[2 * i], src[2 * i + 1]);
                        let (g0, g1) = (gr[2 * i], gr[2 * i + 1]);
                        dst[2 * i] = a[i] * g0 + c[i] * g1;
                        dst[2 * i + 1] = b[i] * g0 + d[i] * g1;
                        dc[0][i] += g0 * x0;
                        dc[1][i] += g0 * x1;
                        dc[2][i] += g1 * x0;
                        dc[3][i] += g1 * x1;
                    }
                }
                let mut out = vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))];
                for (var, grad) in coeffs.iter().zip(dc) {
                    out.push((*var, Tensor::from_parts(self.shape(*var).to_vec(), grad)));
                }
                out
            }
            Op::ApplyMatrices { x, mats } => {
                let xv = self.value(*x);
                let mv = self.value(*mats);
                let n = *mv.shape().last().expect("matrix input");
                let count = mv.numel() / (n * n);
                let mut dx = vec![0.0; xv.numel()];
                let mut dm = vec![0.0; mv.numel()];
                for ((src, gr), dst) in xv
                    .data()
                    .chunks(count * n)
                    .zip(g.data().chunks(count * n))
                    .zip(dx.chunks_mut(count * n))
                {
                    for t in 0..count {
                        let m = &mv.data()[t * n * n..][..n * n];
                        let gm = &mut dm[t * n * n..][..n * n];
                        let (xin, gt) = (&src[t * n..][..n], &gr[t * n..][..n]);
                        let dxt = &mut dst[t * n..][..n];
                        for i in 0..n {
                            for j in 0..n {
                                dxt[j] += m[i * n + j] * gt[i];
                                gm[i * n + j] += gt[i] * xin[j];
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), dx)),
                    (*mats, Tensor::from_parts(mv.shape().to_vec(), dm)),
                ]
            }
            Op::SkewFromUpper { v, n } => {
                let n = *n;
                let p = n * (n - 1) / 2;
                let vs = self.shape(*v);
                let mut dv = Vec::with_capacity(vs.iter().product());
                for m in g.data().chunks(n * n) {
                    for i in 0..n {
                        for j in i + 1..n {
                            dv.push(m[i * n + j] - m[j * n + i]);
                        }
                    }
                }
                debug_assert_eq!(dv.len() % p, 0);
                vec![(*v, Tensor::from_parts(vs.to_vec(), dv))]
            }
            Op::Custom { x, backward } => vec![(*x, backward(g, self.value(*x), y))],
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor) -> Vec<(Var, Tensor)> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape()).expect("shapes recorded");
        let (m, k, n) = (d.m, d.k, d.n);
        let (gd, ad, bd) = (g.data(), av.data(), bv.data());
        let mut da = vec![0.0; av.numel()];
        let mut db = vec![0.0; bv.numel()];
        let (want_a, want_b) = (self.needs(a), self.needs(b));
        match d.mode {
            BatchMode::SharedRhs => {
                let rows = d.batch * m;
                if want_a {
                    gemm(rows, n, k, gd, false, bd, true, &mut da, false);
                }
                if want_b {
                    gemm(k, rows, n, ad, true, gd, false, &mut db, false);
                }
            }
            BatchMode::Paired => {
                for i in 0..d.batch {
                    let gi = &gd[i * m * n..];
                    if want_a {
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            &bd[i * k * n..],
                            true,
                            &mut da[i * m * k..],
                            false,
                        );
                    }
                    if want_b {
                        gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..],
                            true,
                            gi,
                            false,
                            &mut db[i * k * n..],
                            false,
                        );
                    }
                }
            }
            BatchMode::SharedLhs => {
                for i in 0..d.batch {
                    let gi = &gd[i * m * n..];
                    if want_a {
                        gemm(m, n, k, gi, false, &bd[i * k * n..], true, &mut da, true);
                    }
                    if want_b {
                        gemm(k, m, n, ad, true, gi, false, &mut db[i * k * n..], false);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(2);
        if want_a {
            out.push((a, Tensor::from_parts(av.shape().to_vec(), da)));
        }
        if want_b {
            out.push((b, Tensor::from_parts(bv.shape().to_vec(), db)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut store = ParamStore::new();
        let p = store
            .add(
                "p",
                ParamGroup::Weight,
                Tensor::from_vec(vec![0.3, -1.2, 4.0]),
            )
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.get(p).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut store = ParamStore::new();
        let vals = vec![0.3, -1.2, 4.0, 0.0];
        let p = store
            .add("p", ParamGroup::Weight, Tensor::from_vec(vals.clone()))
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), vals.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.scalar(0.0).unwrap();
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).item().unwrap(), 1.0);
        let x = g.constant(Tensor::from_vec(vec![1.5, -2.0])).unwrap();
        let ones = g.constant(Tensor::ones(&[2])).unwrap();
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let b = g.scalar(0.81).unwrap();
        let inv = g.powf(b, -1.0).unwrap();
        assert!((g.value(inv).item().unwrap() - 1.234_567_901_234_567_9).abs() < 1e-15);
        let neg = g.scalar(-0.5).unwrap();
        assert!(matches!(g.powf(neg, 0.5), Err(Error::Domain { .. })));
        assert!(g.powf(neg, 2.0).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3])).unwrap();
        let s = g.softmax(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_vec(vec![0.0, 3f64.ln()])).unwrap();
        let s = g.softmax(x).unwrap();
        assert!(g.value(s).max_abs_diff(&Tensor::from_vec(vec![0.25, 0.75])) < 1e-15);
        // huge logits stay finite thanks to max subtraction
        let x = g.constant(Tensor::from_vec(vec![1000.0, 999.0])).unwrap();
        assert!(g.softmax(x).is_ok());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.scalar(800.0).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.25)).unwrap();
        let gain = g.constant(Tensor::ones(&[4])).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let badgain = g.constant(Tensor::ones(&[3])).unwrap();
        assert!(g.layer_norm(x, badgain, bias).is_err());
    }

    #[test]
    fn skew_from_upper_layout() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let x = g.skew_from_upper(v, 3).unwrap();
        let expect =
            Tensor::from_rows(&[[0.0, 1.0, 2.0], [-1.0, 0.0, 3.0], [-2.0, -3.0, 0.0]]).unwrap();
        assert_eq!(g.value(x), &expect);
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3, 3])).unwrap();
        let e = g.expm(z).unwrap();
        for m in g.value(e).data().chunks(9) {
            assert_eq!(m, Tensor::eye(3).data());
        }
    }
}
