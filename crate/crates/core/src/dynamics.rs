//! Manifold-aware forward-Euler evolution of learned and analytic systems.
//!
//! Latent trajectories are the encoder images of the task-space Euler states,
//! `y_k = psi(x_k)`; no separate latent integrator exists.

use std::io::Write;
use std::sync::Arc;

use crate::diffengine::{kernels, NodeId, ProjectionBlock, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::ManifoldSpec;
use crate::network::{Order, PolicyParams};

/// Longest rollout that may be recorded for backpropagation through time.
pub const MAX_BPTT_WINDOW: usize = 14;

/// A batched autonomous system with a latent embedding.
pub trait VectorField: Sync {
    fn order(&self) -> Order;
    fn state_dim(&self) -> usize;
    /// `(latent, derivative)` for every row of `states`. Second-order fields
    /// return accelerations.
    fn evaluate(&self, states: &Tensor) -> Result<(Tensor, Tensor)>;
    fn latent(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.evaluate(states)?.0)
    }
}

/// Forward-Euler increment direction: the derivative itself for first-order
/// systems, `[v | a]` for stacked second-order states.
fn increment(order: Order, x: &Tensor, f: &Tensor) -> Result<Tensor> {
    match order {
        Order::First => Ok(f.clone()),
        Order::Second => {
            let half = x.cols() / 2;
            kernels::concat_cols(&kernels::slice_cols(x, half, half)?, f)
        }
    }
}

/// Applies one projected Euler step to every row given precomputed derivatives.
pub fn advance(
    order: Order,
    plan: &[ProjectionBlock],
    x: &Tensor,
    f: &Tensor,
    dt: f64,
    step: usize,
) -> Result<Tensor> {
    if !f.is_finite() {
        return Err(Error::Rollout { step });
    }
    let raw = kernels::axpy(x, &increment(order, x, f)?, dt)?;
    let (mut y, _) = kernels::project(plan, &raw)?;
    if let Some(mask) = wall_stop(order, plan, &raw, &y) {
        for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
    }
    Ok(y)
}

/// Inelastic walls for stacked second-order states: where a position
/// coordinate was clipped, the outward velocity on that axis is zeroed.
/// Returns the multiplicative mask, or `None` when nothing hit a wall.
fn wall_stop(order: Order, plan: &[ProjectionBlock], raw: &Tensor, projected: &Tensor) -> Option<Tensor> {
    if order != Order::Second {
        return None;
    }
    let cols = raw.cols();
    let half = cols / 2;
    let mut mask: Option<Vec<f64>> = None;
    for (i, (r, p)) in raw.iter_rows().zip(projected.iter_rows()).enumerate() {
        for block in plan {
            let ProjectionBlock::Clip { start, lo, .. } = block else { continue };
            for j in *start..(start + lo.len()).min(half) {
                let push = r[j] - p[j];
                if push != 0.0 && p[j + half] * push > 0.0 {
                    mask.get_or_insert_with(|| vec![1.0; raw.len()])[i * cols + j + half] = 0.0;
                }
            }
        }
    }
    mask.map(|m| Tensor::from_raw(raw.shape().to_vec(), m))
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Contract(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

fn single_row(x: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![1, x.len()], x.to_vec())
}

/// Position block of a state space: the whole space for first-order
/// systems, the leading half for stacked second-order states.
pub fn position_space(spec: &ManifoldSpec, order: Order) -> ManifoldSpec {
    match (spec, order) {
        (_, Order::First) => spec.clone(),
        (ManifoldSpec::Box { bounds }, Order::Second) => ManifoldSpec::Box {
            bounds: bounds[..bounds.len() / 2].to_vec(),
        },
        (ManifoldSpec::Product { factors }, Order::Second) => factors[0].clone(),
        (other, Order::Second) => other.clone(),
    }
}

/// One projected Euler step from a single state.
pub fn euler_step<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    x: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    check_dt(dt)?;
    let xt = single_row(x)?;
    let (_, f) = field.evaluate(&xt)?;
    Ok(advance(field.order(), &spec.projection_plan(), &xt, &f, dt, 0)?.into_data())
}

/// Task-space states, their latents and the derivatives that moved them.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub dt: f64,
    pub task_states: Vec<Vec<f64>>,
    pub latent_states: Vec<Vec<f64>>,
    pub derivatives: Vec<Vec<f64>>,
}

impl RolloutTrace {
    pub fn steps(&self) -> usize {
        self.derivatives.len()
    }

    pub fn last(&self) -> &[f64] {
        self.task_states.last().expect("trace holds at least x0")
    }

    /// CSV with columns `t, x_1..x_n, y_1..y_m`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.task_states[0].len();
        let m = self.latent_states[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("y_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, (x, y)) in self.task_states.iter().zip(&self.latent_states).enumerate() {
            let mut row = vec![format!("{}", k as f64 * self.dt)];
            row.extend(x.iter().chain(y).map(|v| format!("{v}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Integrates `steps` Euler steps from `x0`, recording latents on every state.
pub fn rollout<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    x0: &[f64],
    steps: usize,
    dt: f64,
) -> Result<RolloutTrace> {
    check_dt(dt)?;
    if x0.len() != spec.dim() || field.state_dim() != spec.dim() {
        return Err(Error::Dimension(format!(
            "state of length {} for a {}-dimensional space",
            x0.len(),
            spec.dim()
        )));
    }
    let plan = spec.projection_plan();
    let mut x = single_row(x0)?;
    let mut trace = RolloutTrace {
        dt,
        task_states: vec![x0.to_vec()],
        latent_states: Vec::with_capacity(steps + 1),
        derivatives: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let (y, f) = field.evaluate(&x)?;
        trace.latent_states.push(y.into_data());
        x = advance(field.order(), &plan, &x, &f, dt, k)?;
        trace.derivatives.push(f.into_data());
        trace.task_states.push(x.data().to_vec());
    }
    trace.latent_states.push(field.latent(&x)?.into_data());
    Ok(trace)
}

/// Batched rollout keeping every intermediate state (rows = trajectories).
pub fn rollout_batch<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    x0: &Tensor,
    steps: usize,
    dt: f64,
) -> Result<Vec<Tensor>> {
    check_dt(dt)?;
    let plan = spec.projection_plan();
    let mut states = vec![x0.clone()];
    for k in 0..steps {
        let (_, f) = field.evaluate(&states[k])?;
        let next = advance(field.order(), &plan, &states[k], &f, dt, k)?;
        states.push(next);
    }
    Ok(states)
}

/// Batched rollout returning only the final states; memory stays flat for
/// long horizons.
pub fn rollout_final<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    x0: &Tensor,
    steps: usize,
    dt: f64,
) -> Result<Tensor> {
    check_dt(dt)?;
    let plan = spec.projection_plan();
    let mut x = x0.clone();
    for k in 0..steps {
        let (_, f) = field.evaluate(&x)?;
        x = advance(field.order(), &plan, &x, &f, dt, k)?;
    }
    Ok(x)
}

/// Node handles of a rollout recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub task_states: Vec<NodeId>,
    pub latent_states: Vec<NodeId>,
    pub derivatives: Vec<NodeId>,
}

/// Records `steps` Euler steps of the policy on `tape`, starting from the
/// batch `x0`. Box clipping passes gradients straight through on unclipped
/// coordinates; sphere normalization is differentiated exactly.
///
/// `handles` are the parameter nodes from [`PolicyParams::register`].
pub fn rollout_differentiable(
    params: &PolicyParams,
    handles: &[NodeId],
    tape: &mut Tape,
    spec: &ManifoldSpec,
    x0: NodeId,
    steps: usize,
    dt: f64,
) -> Result<TapeTrace> {
    check_dt(dt)?;
    if steps > MAX_BPTT_WINDOW {
        return Err(Error::Contract(format!(
            "{steps} steps exceed the BPTT window of {MAX_BPTT_WINDOW}"
        )));
    }
    let plan: Arc<[ProjectionBlock]> = spec.projection_plan().into();
    let order = params.config().order;
    let half = spec.dim() / 2;
    let mut trace = TapeTrace {
        task_states: vec![x0],
        latent_states: Vec::with_capacity(steps + 1),
        derivatives: Vec::with_capacity(steps),
    };
    let mut x = x0;
    for k in 0..steps {
        let y = params.psi_on(tape, handles, &x)?;
        let f = params.phi_on(tape, handles, &y)?;
        if !tape.value(f).is_finite() {
            return Err(Error::Rollout { step: k });
        }
        let inc = match order {
            Order::First => f,
            Order::Second => {
                let v = tape.slice_cols(x, half, half)?;
                tape.concat_cols(v, f)?
            }
        };
        let raw = tape.axpy(x, inc, dt)?;
        x = tape.project(raw, plan.clone())?;
        if let Some(mask) = wall_stop(order, &plan, tape.value(raw), tape.value(x)) {
            let mask = tape.input(mask);
            x = tape.mul(x, mask)?;
        }
        trace.latent_states.push(y);
        trace.derivatives.push(f);
        trace.task_states.push(x);
    }
    let y = params.psi_on(tape, handles, &x)?;
    trace.latent_states.push(y);
    Ok(trace)
}

/// `dx/dt = rate * (x - goal)` with the identity as latent map.
///
/// A negative `rate` gives a globally stable linear system.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub rate: f64,
    pub goal: Vec<f64>,
}

impl VectorField for LinearField {
    fn order(&self) -> Order {
        Order::First
    }

    fn state_dim(&self) -> usize {
        self.goal.len()
    }

    fn evaluate(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        if states.cols() != self.goal.len() {
            return Err(Error::Dimension("state width does not match goal".into()));
        }
        let mut f = states.clone();
        for row in f.data_mut().chunks_exact_mut(self.goal.len()) {
            for (v, g) in row.iter_mut().zip(&self.goal) {
                *v = self.rate * (*v - g);
            }
        }
        Ok((states.clone(), f))
    }
}

/// Planar field with two attractors at `(-1, 0)` and `(1, 0)`:
/// `dx0/dt = x0 - x0^3`, `dx1/dt = -x1`. Each attractor's basin is one half
/// of the square `[-1, 1]^2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct BistableField;

impl VectorField for BistableField {
    fn order(&self) -> Order {
        Order::First
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        if states.cols() != 2 {
            return Err(Error::Dimension("bistable field is planar".into()));
        }
        let mut f = states.clone();
        for row in f.data_mut().chunks_exact_mut(2) {
            let (a, b) = (row[0], row[1]);
            row[0] = a - a * a * a;
            row[1] = -b;
        }
        Ok((states.clone(), f))
    }
}
