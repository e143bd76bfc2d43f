use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{clamped_cosine, euclidean, LatentMetric};

use super::kernels::{self, ProjectionBlock, RowStats};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<RowStats> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Axpy { a: NodeId, b: NodeId, s: f64 },
    Relu(NodeId),
    Project { x: NodeId, plan: Arc<[ProjectionBlock]>, pass: Vec<bool> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(NodeId, NodeId),
    RowDistance { x: NodeId, goal: NodeId, metric: LatentMetric },
    RowDot { x: NodeId, dirs: Tensor },
    WeightedSqError { x: NodeId, target: Tensor, weights: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation for reverse-mode differentiation.
///
/// One node per layer-level primitive. Nodes only reference earlier nodes,
/// so the sequence is already in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar output with respect to every registered parameter,
/// in registration order.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Gradient reaching an input or parameter node, if any flowed into it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, value);
        self.params.push(id);
        id
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::gelu(self.value(x));
        self.push(Op::Gelu(x), y)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (y, stats) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, stats }, y))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_raw(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a);
        let y = Tensor::from_raw(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect());
        self.push(Op::Scale(a, s), y)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let y = Tensor::from_raw(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect());
        self.push(Op::AddScalar(a), y)
    }

    /// `a + s * b`.
    pub fn axpy(&mut self, a: NodeId, b: NodeId, s: f64) -> Result<NodeId> {
        let y = kernels::axpy(self.value(a), self.value(b), s)?;
        Ok(self.push(Op::Axpy { a, b, s }, y))
    }

    /// `max(0, a)` with subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let y = Tensor::from_raw(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect());
        self.push(Op::Relu(a), y)
    }

    pub fn project(&mut self, x: NodeId, plan: Arc<[ProjectionBlock]>) -> Result<NodeId> {
        let (y, pass) = kernels::project(&plan, self.value(x))?;
        Ok(self.push(Op::Project { x, plan, pass }, y))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let y = kernels::slice_cols(self.value(x), start, len)?;
        Ok(self.push(Op::SliceCols { x, start }, y))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), y))
    }

    /// Distance from every row of `x` to the single row `goal`, one entry per row.
    pub fn row_distance(&mut self, x: NodeId, goal: NodeId, metric: LatentMetric) -> Result<NodeId> {
        let (vx, vg) = (self.value(x), self.value(goal));
        if vg.rows() != 1 || vg.cols() != vx.cols() {
            return Err(Error::Dimension(format!(
                "row_distance of {:?} to goal {:?}",
                vx.shape(),
                vg.shape()
            )));
        }
        let g = vg.row(0);
        let mut out = Vec::with_capacity(vx.rows());
        for row in vx.iter_rows() {
            out.push(crate::geometry::distance(&metric, row, g)?);
        }
        let y = Tensor::from_raw(vec![out.len()], out);
        Ok(self.push(Op::RowDistance { x, goal, metric }, y))
    }

    /// Row-wise dot product with constant directions.
    pub fn row_dot(&mut self, x: NodeId, dirs: Tensor) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rows() != dirs.rows() || vx.cols() != dirs.cols() {
            return Err(Error::Dimension(format!(
                "row_dot of {:?} with {:?}",
                vx.shape(),
                dirs.shape()
            )));
        }
        let out: Vec<f64> = vx
            .iter_rows()
            .zip(dirs.iter_rows())
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
            .collect();
        let y = Tensor::from_raw(vec![out.len()], out);
        Ok(self.push(Op::RowDot { x, dirs }, y))
    }

    /// `sum_i w_i * ||x_i - target_i||^2` over rows.
    pub fn weighted_sq_error(&mut self, x: NodeId, target: Tensor, weights: Vec<f64>) -> Result<NodeId> {
        let vx = self.value(x);
        if !vx.same_shape(&target) || weights.len() != vx.rows() {
            return Err(Error::Dimension(format!(
                "squared error of {:?} against {:?} with {} weights",
                vx.shape(),
                target.shape(),
                weights.len()
            )));
        }
        let total: f64 = vx
            .iter_rows()
            .zip(target.iter_rows())
            .zip(&weights)
            .map(|((a, b), w)| {
                if *w == 0.0 {
                    0.0
                } else {
                    w * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
                }
            })
            .sum();
        Ok(self.push(Op::WeightedSqError { x, target, weights }, Tensor::scalar(total)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), y)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let y = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(Op::Mean(a), y)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_raw(out.shape().to_vec(), vec![1.0]));

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = kernels::affine_backward(self.value(*x), self.value(*w), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Gelu(x) => {
                    let dx = kernels::gelu_backward(self.value(*x), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(self.value(*x), self.value(*gain), stats, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, map(&dy, |g| -g));
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&dy, self.value(*b), |g, v| g * v);
                    let db = zip_map(&dy, self.value(*a), |g, v| g * v);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, map(&dy, |g| g * s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, dy),
                Op::Axpy { a, b, s } => {
                    accumulate(&mut grads, *b, map(&dy, |g| g * s));
                    accumulate(&mut grads, *a, dy);
                }
                Op::Relu(a) => {
                    let da = zip_map(&dy, self.value(*a), |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Project { x, plan, pass } => {
                    let dx = kernels::project_backward(plan, self.value(*x), pass, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let (cols, len) = (vx.cols(), dy.cols());
                    let mut dx = Tensor::zeros(vx.shape());
                    for (drow, grow) in dx.data_mut().chunks_exact_mut(cols).zip(dy.iter_rows()) {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let da = kernels::slice_cols(&dy, 0, ca)?;
                    let db = kernels::slice_cols(&dy, ca, cb)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::RowDistance { x, goal, metric } => {
                    let (dx, dgoal) = row_distance_backward(self.value(*x), self.value(*goal), metric, &dy)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *goal, dgoal);
                }
                Op::RowDot { x, dirs } => {
                    let vx = self.value(*x);
                    let mut dx = dirs.clone();
                    for (row, g) in dx.data_mut().chunks_exact_mut(vx.cols()).zip(dy.data()) {
                        row.iter_mut().for_each(|v| *v *= g);
                    }
                    let dx = Tensor::from_raw(vx.shape().to_vec(), dx.into_data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::WeightedSqError { x, target, weights } => {
                    let g = dy.item();
                    let vx = self.value(*x);
                    let cols = vx.cols();
                    let mut dx = Vec::with_capacity(vx.len());
                    for ((a, b), w) in vx.iter_rows().zip(target.iter_rows()).zip(weights) {
                        dx.extend(a.iter().zip(b).map(|(p, q)| 2.0 * g * w * (p - q)));
                    }
                    debug_assert_eq!(dx.len(), vx.rows() * cols);
                    accumulate(&mut grads, *x, Tensor::from_raw(vx.shape().to_vec(), dx));
                }
                Op::Sum(a) => {
                    let g = dy.item();
                    let va = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::from_raw(va.shape().to_vec(), vec![g; va.len()]));
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let g = dy.item() / va.len() as f64;
                    accumulate(&mut grads, *a, Tensor::from_raw(va.shape().to_vec(), vec![g; va.len()]));
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|id| {
                grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()))
            })
            .collect();
        Ok(Gradients { params, nodes: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        b.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

fn row_distance_backward(
    x: &Tensor,
    goal: &Tensor,
    metric: &LatentMetric,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let cols = x.cols();
    let g = goal.row(0);
    let mut dx = vec![0.0; x.len()];
    let mut dgoal = vec![0.0; cols];
    for ((row, drow), &up) in x.iter_rows().zip(dx.chunks_exact_mut(cols)).zip(dy.data()) {
        if up == 0.0 {
            continue;
        }
        match metric {
            LatentMetric::Euclidean => {
                let d = euclidean(row, g);
                if d == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    let v = up * (row[j] - g[j]) / d;
                    drow[j] = v;
                    dgoal[j] -= v;
                }
            }
            LatentMetric::GreatCircle { radius } => {
                let (c, na, nb) = clamped_cosine(row, g)?;
                if c.abs() >= 1.0 {
                    continue;
                }
                let dd_dc = -radius / (1.0 - c * c).sqrt();
                for j in 0..cols {
                    drow[j] = up * dd_dc * (g[j] / (na * nb) - c * row[j] / (na * na));
                    dgoal[j] += up * dd_dc * (row[j] / (na * nb) - c * g[j] / (nb * nb));
                }
            }
        }
    }
    Ok((
        Tensor::from_raw(x.shape().to_vec(), dx),
        Tensor::from_raw(goal.shape().to_vec(), dgoal),
    ))
}
