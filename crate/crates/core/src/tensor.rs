//! Dense row-major `f64` tensors and the numeric kernels behind the graph ops.

use std::fmt;

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` in row-major order.
///
/// A tensor with an empty shape is a scalar holding one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::NotScalar {
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Row-major 2-D slice `[rows, cols]` view of the last axis.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = self.shape.last().copied().unwrap_or(1);
        self.data.chunks(cols)
    }

    /// Index of the maximum along the last axis, one entry per row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn transpose_last(&self) -> Result<Tensor> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::shape("transpose", format!("rank {n} < 2")));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        permute(self, &axes)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

// ---------------------------------------------------------------------------
// broadcasting

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let lead = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, in_offset)` for every element of `out`, where
/// `in_offset` addresses the broadcast source of shape `shape`.
fn for_each_broadcast(shape: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(shape, out);
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for i in 0..numel {
        f(i, off);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < out[axis] {
                break;
            }
            off -= strides[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
        Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape, b.shape),
        )
    })?;
    if out == a.shape && is_suffix(&b.shape, &a.shape) {
        let n = b.data.len();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % n]))
            .collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let numel: usize = out.iter().product();
    let mut offs_a = Vec::with_capacity(numel);
    for_each_broadcast(&a.shape, &out, |_, o| offs_a.push(o));
    let mut data = Vec::with_capacity(numel);
    for_each_broadcast(&b.shape, &out, |i, ob| {
        data.push(f(a.data[offs_a[i]], b.data[ob]))
    });
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` down to `shape`, the adjoint of broadcasting `shape` up.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = vec![0.0; shape.iter().product()];
    if is_suffix(shape, &grad.shape) {
        let n = out.len();
        for (i, &g) in grad.data.iter().enumerate() {
            out[i % n] += g;
        }
    } else {
        for_each_broadcast(shape, &grad.shape, |i, o| out[o] += grad.data[i]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// matrix products

/// `c (+)= op(a) · op(b)` on row-major buffers, `op` optionally transposing.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches, given
    // the row/column strides derived from the same m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How the batch dimensions of a matmul pair up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BatchMode {
    /// Equal batch shapes, one product per batch entry.
    Paired,
    /// `b` is a plain matrix shared by every batch entry of `a`.
    SharedRhs,
    /// `a` is a plain matrix shared by every batch entry of `b`.
    SharedLhs,
}

pub(crate) struct MatmulDims {
    pub mode: BatchMode,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be at least 2-D, got {a:?} and {b:?}"),
        ));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    let (m, k) = (am[0], am[1]);
    let (k2, n) = (bm[0], bm[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {a:?} · {b:?} ({k} vs {k2})"),
        ));
    }
    let (mode, batch_shape) = if ab == bb {
        (BatchMode::Paired, ab)
    } else if bb.is_empty() {
        (BatchMode::SharedRhs, ab)
    } else if ab.is_empty() {
        (BatchMode::SharedLhs, bb)
    } else {
        return Err(Error::shape(
            "matmul",
            format!("batch extents not broadcastable: {a:?} · {b:?}"),
        ));
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        mode,
        batch: batch_shape.iter().product(),
        m,
        k,
        n,
        out_shape,
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(&a.shape, &b.shape)?;
    let mut out = vec![0.0; d.out_shape.iter().product()];
    let (m, k, n) = (d.m, d.k, d.n);
    match d.mode {
        BatchMode::SharedRhs => gemm(
            d.batch * m,
            k,
            n,
            &a.data,
            false,
            &b.data,
            false,
            &mut out,
            false,
        ),
        BatchMode::Paired => {
            for i in 0..d.batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data[i * m * k..],
                    false,
                    &b.data[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        BatchMode::SharedLhs => {
            for i in 0..d.batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data,
                    false,
                    &b.data[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

// ---------------------------------------------------------------------------
// layout ops

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let n = x.ndim();
    let mut seen = vec![false; n];
    if axes.len() != n
        || axes
            .iter()
            .any(|&a| a >= n || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::shape(
            "permute",
            format!("{axes:?} is not a permutation of {n} axes"),
        ));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let mut in_strides = vec![0; n];
    let mut acc = 1;
    for i in (0..n).rev() {
        in_strides[i] = acc;
        acc *= x.shape[i];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..x.numel() {
        data.push(x.data[off]);
        for axis in (0..n).rev() {
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.ndim() || len == 0 || start + len > x.shape[axis] {
        return Err(Error::shape(
            "narrow",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape),
        ));
    }
    let (outer, full, inner) = split_axis(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::shape("concat", format!("axis {axis} out of range")));
    }
    for p in parts {
        let same_rank = p.ndim() == first.ndim();
        if !same_rank
            || p.shape[..axis] != first.shape[..axis]
            || p.shape[axis + 1..] != first.shape[axis + 1..]
        {
            return Err(Error::shape(
                "concat",
                format!(
                    "{:?} incompatible with {:?} on axis {axis}",
                    p.shape, first.shape
                ),
            ));
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}
