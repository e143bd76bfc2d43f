//! Imitation, triplet stability and boundary losses, recorded on a tape.

use serde::{Deserialize, Serialize};

use crate::data::SegmentBatch;
use crate::diffengine::{kernels, NodeId, Tape, Tensor};
use crate::dynamics::{rollout_batch, rollout_differentiable, VectorField, MAX_BPTT_WINDOW};
use crate::error::{Error, Result};
use crate::geometry::{self, LatentMetric, ManifoldSpec};
use crate::network::{Order, PolicyParams};

/// Default weight of the boundary term.
pub const DEFAULT_BOUNDARY_WEIGHT: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin; strictly positive.
    pub margin: f64,
    /// Weight of the stability term; zero trains plain behavioral cloning.
    pub lambda: f64,
    pub boundary_weight: f64,
    pub metric: LatentMetric,
    pub window_imitation: usize,
    pub window_stability: usize,
    pub batch_imitation: usize,
    /// Also the number of boundary samples per iteration.
    pub batch_stability: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::config("loss.margin", "must be strictly positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("loss.lambda", "must be nonnegative"));
        }
        if !(self.boundary_weight >= 0.0) || !self.boundary_weight.is_finite() {
            return Err(Error::config("loss.boundary_weight", "must be nonnegative"));
        }
        for (field, w) in [
            ("loss.window_imitation", self.window_imitation),
            ("loss.window_stability", self.window_stability),
        ] {
            if w == 0 || w > MAX_BPTT_WINDOW {
                return Err(Error::config(field, format!("must lie in 1..={MAX_BPTT_WINDOW}")));
            }
        }
        if self.batch_imitation == 0 || self.batch_stability == 0 {
            return Err(Error::config("loss.batch_imitation", "batches must be nonempty"));
        }
        self.metric.validate()
    }
}

/// Boundary states with outward normals, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryBatch {
    pub states: Tensor,
    pub normals: Tensor,
}

/// Mean squared state error over every labelled (segment, step) pair of a
/// multi-step rollout started at the segments' first states.
pub fn imitation_loss(
    params: &PolicyParams,
    handles: &[NodeId],
    tape: &mut Tape,
    spec: &ManifoldSpec,
    segments: &SegmentBatch,
    dt: f64,
) -> Result<NodeId> {
    if segments.is_empty() {
        return Err(Error::Contract("imitation loss needs at least one segment".into()));
    }
    let labels = segments.label_count();
    if labels == 0 {
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    let x0 = tape.input(segments.initial.clone());
    let trace = rollout_differentiable(params, handles, tape, spec, x0, segments.horizon(), dt)?;
    let mut total = None;
    for (k, (target, mask)) in segments.targets.iter().zip(&segments.mask).enumerate() {
        let e = tape.weighted_sq_error(trace.task_states[k + 1], target.clone(), mask.clone())?;
        total = Some(match total {
            None => e,
            Some(t) => tape.add(t, e)?,
        });
    }
    let total = total.expect("labels imply at least one step");
    Ok(tape.scale(total, 1.0 / labels as f64))
}

/// Latent goal `psi(goal)` recorded on the tape so that it tracks the
/// parameters.
pub fn latent_goal_on(
    params: &PolicyParams,
    handles: &[NodeId],
    tape: &mut Tape,
    goal: &[f64],
) -> Result<NodeId> {
    let g = tape.input(Tensor::new(vec![1, goal.len()], goal.to_vec())?);
    params.psi_on(tape, handles, &g)
}

/// Mean over initial states and `window` consecutive steps of
/// `max(0, margin + d(y_g, y_{t+1}) - d(y_g, y_t))`.
#[allow(clippy::too_many_arguments)]
pub fn stability_loss(
    params: &PolicyParams,
    handles: &[NodeId],
    tape: &mut Tape,
    spec: &ManifoldSpec,
    metric: LatentMetric,
    initial: &Tensor,
    goal: &[f64],
    window: usize,
    margin: f64,
    dt: f64,
) -> Result<NodeId> {
    if window == 0 {
        return Err(Error::Contract("stability window must be positive".into()));
    }
    let yg = latent_goal_on(params, handles, tape, goal)?;
    let x0 = tape.input(initial.clone());
    let trace = rollout_differentiable(params, handles, tape, spec, x0, window, dt)?;
    let dists = trace
        .latent_states
        .iter()
        .map(|y| tape.row_distance(*y, yg, metric))
        .collect::<Result<Vec<_>>>()?;
    let mut total = None;
    for pair in dists.windows(2) {
        let gap = tape.sub(pair[1], pair[0])?;
        let hinge = tape.add_scalar(gap, margin);
        let hinge = tape.relu(hinge);
        let term = tape.mean(hinge);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(tape.scale(total.expect("window is positive"), 1.0 / window as f64))
}

/// Individual hinge terms of the stability loss computed without a tape,
/// ordered step-major: `terms[t][i]` for initial state `i`.
#[allow(clippy::too_many_arguments)]
pub fn stability_terms<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    metric: LatentMetric,
    initial: &Tensor,
    goal: &[f64],
    window: usize,
    margin: f64,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    let yg = field.latent(&Tensor::new(vec![1, goal.len()], goal.to_vec())?)?;
    let states = rollout_batch(field, spec, initial, window, dt)?;
    let dists = states
        .iter()
        .map(|x| {
            let y = field.latent(x)?;
            y.iter_rows()
                .map(|row| geometry::distance(&metric, row, yg.row(0)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(dists
        .windows(2)
        .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| (margin + b - a).max(0.0)).collect())
        .collect())
}

/// Mean of `max(0, n . f)` over boundary states, where `f` is the network
/// output: the velocity of a first-order system, the acceleration of the
/// position block of a second-order one. Second-order wall states are
/// expected at rest along the normal, where the acceleration alone decides
/// whether the state leaves the wall.
pub fn boundary_loss(
    params: &PolicyParams,
    handles: &[NodeId],
    tape: &mut Tape,
    spec: &ManifoldSpec,
    batch: &BoundaryBatch,
) -> Result<NodeId> {
    if !spec.is_box() {
        return Err(Error::Contract("the boundary loss applies to box state spaces only".into()));
    }
    let x = tape.input(batch.states.clone());
    let y = params.psi_on(tape, handles, &x)?;
    let f = params.phi_on(tape, handles, &y)?;
    let normals = match params.config().order {
        Order::First => batch.normals.clone(),
        Order::Second => kernels::slice_cols(&batch.normals, 0, spec.dim() / 2)?,
    };
    let outward = tape.row_dot(f, normals)?;
    let hinge = tape.relu(outward);
    Ok(tape.mean(hinge))
}

/// Batches consumed by one evaluation of the total loss.
#[derive(Clone, Debug)]
pub struct LossBatches {
    pub segments: SegmentBatch,
    pub stability_states: Tensor,
    pub boundary: Option<BoundaryBatch>,
}

/// Node handles of each term; absent terms were skipped because their
/// weight is zero or they do not apply.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub imitation: NodeId,
    pub stability: Option<NodeId>,
    pub boundary: Option<NodeId>,
    pub total: NodeId,
}

/// Scalar values of the recorded terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub imitation: f64,
    pub stability: f64,
    pub boundary: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).item());
        LossValues {
            imitation: tape.value(self.imitation).item(),
            stability: v(self.stability),
            boundary: v(self.boundary),
            total: tape.value(self.total).item(),
        }
    }
}

/// `imitation + lambda * stability + boundary_weight * boundary`, the last
/// term only on box spaces.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    params: &PolicyParams,
    handles: &[NodeId],
    tape: &mut Tape,
    spec: &ManifoldSpec,
    config: &LossConfig,
    batches: &LossBatches,
    goal: &[f64],
    dt: f64,
) -> Result<LossNodes> {
    let imitation = imitation_loss(params, handles, tape, spec, &batches.segments, dt)?;
    let mut total = imitation;
    let mut stability = None;
    if config.lambda > 0.0 {
        let s = stability_loss(
            params,
            handles,
            tape,
            spec,
            config.metric,
            &batches.stability_states,
            goal,
            config.window_stability,
            config.margin,
            dt,
        )?;
        let weighted = tape.scale(s, config.lambda);
        total = tape.add(total, weighted)?;
        stability = Some(s);
    }
    let mut boundary = None;
    if config.boundary_weight > 0.0 && spec.is_box() {
        if let Some(batch) = &batches.boundary {
            let b = boundary_loss(params, handles, tape, spec, batch)?;
            let weighted = tape.scale(b, config.boundary_weight);
            total = tape.add(total, weighted)?;
            boundary = Some(b);
        }
    }
    Ok(LossNodes {
        imitation,
        stability,
        boundary,
        total,
    })
}
