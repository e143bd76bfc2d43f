//! Forward and backward arithmetic shared by the tape and the eager evaluator.
//!
//! Both evaluation paths call these functions, so a recorded computation and
//! an unrecorded one produce bit-identical values.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Stabilizer added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `out = a * b^T` style product wrapper around `matrixmultiply::dgemm`.
///
/// Strides are given in elements. `c` is overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover every strided index
    // addressed for the given m/k/n and strides; `c` is a dense m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x W^T + b` row by row. `W` is `out x in`, `b` has `out` entries.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::Dimension(format!("weight must be a matrix, got {:?}", w.shape())));
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.cols() != inp || x.shape().len() > 2 {
        return Err(Error::Dimension(format!(
            "affine input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if b.len() != out {
        return Err(Error::Dimension(format!(
            "affine bias has {} entries, weight has {out} rows",
            b.len()
        )));
    }
    let rows = x.rows();
    let mut y = vec![0.0; rows * out];
    gemm(rows, inp, out, x.data(), inp, 1, w.data(), 1, inp, &mut y);
    for row in y.chunks_exact_mut(out) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    let shape = if x.shape().len() == 1 { vec![out] } else { vec![rows, out] };
    Ok(Tensor::from_raw(shape, y))
}

/// Gradients of [`affine`] with respect to `(x, W, b)`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let mut dx = vec![0.0; rows * inp];
    gemm(rows, out, inp, dy.data(), out, 1, w.data(), inp, 1, &mut dx);
    let mut dw = vec![0.0; out * inp];
    gemm(out, rows, inp, dy.data(), 1, out, x.data(), inp, 1, &mut dw);
    let mut db = vec![0.0; out];
    for row in dy.data().chunks_exact(out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (
        Tensor::from_raw(x.shape().to_vec(), dx),
        Tensor::from_raw(w.shape().to_vec(), dw),
        Tensor::from_raw(vec![out], db),
    )
}

/// Exact GELU: `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of [`gelu_scalar`]: `Phi(x) + x phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_raw(x.shape().to_vec(), data)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_raw(x.shape().to_vec(), data)
}

/// Per-row mean and reciprocal standard deviation used by [`layer_norm`].
#[derive(Clone, Copy, Debug)]
pub struct RowStats {
    pub mean: f64,
    pub rstd: f64,
}

/// Per-row normalization `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<RowStats>)> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Dimension(format!(
            "layer_norm over {cols} features given gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut stats = Vec::with_capacity(x.rows());
    let n = cols as f64;
    for row in x.iter_rows() {
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push((v - mean) * rstd * g + b);
        }
        stats.push(RowStats { mean, rstd });
    }
    Ok((Tensor::from_raw(x.shape().to_vec(), out), stats))
}

/// Gradients of [`layer_norm`] with respect to `(x, gain, bias)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    stats: &[RowStats],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let cols = x.cols();
    let n = cols as f64;
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for ((row, grow), st) in x.iter_rows().zip(dy.iter_rows()).zip(stats) {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cols {
            xhat[j] = (row[j] - st.mean) * st.rstd;
            dxhat[j] = grow[j] * gain.data()[j];
            dgain[j] += grow[j] * xhat[j];
            dbias[j] += grow[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let mean_dxhat = sum_dxhat / n;
        let mean_dxhat_xhat = sum_dxhat_xhat / n;
        for j in 0..cols {
            dx.push(st.rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
        }
    }
    (
        Tensor::from_raw(x.shape().to_vec(), dx),
        Tensor::from_raw(gain.shape().to_vec(), dgain),
        Tensor::from_raw(gain.shape().to_vec(), dbias),
    )
}

/// `a + s * b`.
pub fn axpy(a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!("axpy of {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + s * y).collect();
    Ok(Tensor::from_raw(a.shape().to_vec(), data))
}

/// One block of a row-wise projection onto a state manifold.
#[derive(Clone, Debug, PartialEq)]
pub enum ProjectionBlock {
    /// Clip columns `start..start + lo.len()` to `[lo, hi]`.
    Clip { start: usize, lo: Vec<f64>, hi: Vec<f64> },
    /// Rescale columns `start..start + len` to Euclidean norm `radius`.
    Sphere { start: usize, len: usize, radius: f64 },
}

impl ProjectionBlock {
    pub fn end(&self) -> usize {
        match self {
            ProjectionBlock::Clip { start, lo, .. } => start + lo.len(),
            ProjectionBlock::Sphere { start, len, .. } => start + len,
        }
    }
}

pub fn block_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projects every row of `x` block by block.
///
/// Returns the projected rows and a per-entry mask that is `true` where a
/// clipped coordinate was left unchanged (straight-through gradient).
pub fn project(plan: &[ProjectionBlock], x: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let cols = x.cols();
    if plan.last().map_or(0, |b| b.end()) != cols {
        return Err(Error::Dimension(format!(
            "projection covers {} columns, state has {cols}",
            plan.last().map_or(0, |b| b.end())
        )));
    }
    let mut out = x.data().to_vec();
    let mut pass = vec![true; out.len()];
    for (row, mask) in out.chunks_exact_mut(cols).zip(pass.chunks_exact_mut(cols)) {
        for block in plan {
            match block {
                ProjectionBlock::Clip { start, lo, hi } => {
                    for (j, (l, h)) in lo.iter().zip(hi).enumerate() {
                        let v = row[start + j];
                        if v < *l {
                            row[start + j] = *l;
                            mask[start + j] = false;
                        } else if v > *h {
                            row[start + j] = *h;
                            mask[start + j] = false;
                        }
                    }
                }
                ProjectionBlock::Sphere { start, len, radius } => {
                    let seg = &mut row[*start..start + len];
                    let norm = block_norm(seg);
                    if norm == 0.0 || !norm.is_finite() {
                        return Err(Error::Domain(
                            "cannot project the zero vector onto a sphere".into(),
                        ));
                    }
                    let s = radius / norm;
                    for v in seg.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_raw(x.shape().to_vec(), out), pass))
}

/// Gradient of [`project`]: straight-through on clip blocks (masked), exact
/// Jacobian-vector product on sphere blocks.
pub fn project_backward(
    plan: &[ProjectionBlock],
    x: &Tensor,
    pass: &[bool],
    dy: &Tensor,
) -> Tensor {
    let cols = x.cols();
    let mut dx = dy.data().to_vec();
    for ((drow, xrow), mask) in dx
        .chunks_exact_mut(cols)
        .zip(x.iter_rows())
        .zip(pass.chunks_exact(cols))
    {
        for block in plan {
            match block {
                ProjectionBlock::Clip { start, lo, .. } => {
                    for j in *start..start + lo.len() {
                        if !mask[j] {
                            drow[j] = 0.0;
                        }
                    }
                }
                ProjectionBlock::Sphere { start, len, radius } => {
                    let xs = &xrow[*start..start + len];
                    let ds = &mut drow[*start..start + len];
                    let norm = block_norm(xs);
                    let dot: f64 = xs.iter().zip(ds.iter()).map(|(a, b)| a * b).sum::<f64>() / norm;
                    for (d, v) in ds.iter_mut().zip(xs) {
                        *d = radius / norm * (*d - v / norm * dot);
                    }
                }
            }
        }
    }
    Tensor::from_raw(x.shape().to_vec(), dx)
}

/// Columns `start..start + len` of every row.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let cols = x.cols();
    if start + len > cols || len == 0 {
        return Err(Error::Dimension(format!(
            "column slice {start}..{} out of {cols}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(x.rows() * len);
    for row in x.iter_rows() {
        out.extend_from_slice(&row[start..start + len]);
    }
    let shape = if x.shape().len() == 1 { vec![len] } else { vec![x.rows(), len] };
    Ok(Tensor::from_raw(shape, out))
}

/// Row-wise concatenation `[a | b]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() || a.shape().len() != b.shape().len() {
        return Err(Error::Dimension(format!(
            "concat of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    let shape = if a.shape().len() == 1 {
        vec![ca + cb]
    } else {
        vec![a.rows(), ca + cb]
    };
    Ok(Tensor::from_raw(shape, out))
}
