//! The policy `f(x) = phi(psi(x))`: a feed-forward MLP split into an encoder
//! `psi` whose output is the latent space and a decoder `phi` that maps
//! latents to state derivatives.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scaling;
use crate::diffengine::{Eager, Graph, Tensor};
use crate::dynamics::VectorField;
use crate::error::{Error, Result};
use crate::geometry::{LatentMetric, ManifoldSpec};

/// Checkpoint format version written by this crate.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// State is a position; the network outputs its velocity.
    First,
    /// State stacks position and velocity; the network outputs acceleration.
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub output_dim: usize,
    pub psi_layers: usize,
    pub phi_layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub order: Order,
    pub output_scale: f64,
}

impl NetworkConfig {
    /// Defaults for a state of dimension `state_dim`: three layers on each
    /// side of the split, 300 units, GELU, layer normalization.
    pub fn new(state_dim: usize, order: Order) -> Self {
        let output_dim = match order {
            Order::First => state_dim,
            Order::Second => state_dim / 2,
        };
        NetworkConfig {
            input_dim: state_dim,
            latent_dim: (state_dim + 1).max(8),
            output_dim,
            psi_layers: 3,
            phi_layers: 3,
            width: 300,
            activation: Activation::Gelu,
            layer_norm: true,
            order,
            output_scale: 1.0,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi_layers == 0 || self.phi_layers == 0 {
            return Err(Error::config("network.psi_layers", "both halves need at least one layer"));
        }
        if self.width == 0 || self.latent_dim == 0 || self.input_dim == 0 {
            return Err(Error::config("network.width", "dimensions must be positive"));
        }
        if !(self.output_scale > 0.0) || !self.output_scale.is_finite() {
            return Err(Error::config("network.output_scale", "must be positive"));
        }
        match self.order {
            Order::First if self.output_dim != self.input_dim => Err(Error::config(
                "network.output_dim",
                "first-order output must match the state dimension",
            )),
            Order::Second if self.input_dim % 2 != 0 || self.output_dim * 2 != self.input_dim => {
                Err(Error::config(
                    "network.output_dim",
                    "second-order state must be even and output half of it",
                ))
            }
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out, normalized)` for every layer, encoder first.
    fn layer_shapes(&self) -> Vec<(usize, usize, bool)> {
        let mut shapes = Vec::new();
        for (layers, input, output) in [
            (self.psi_layers, self.input_dim, self.latent_dim),
            (self.phi_layers, self.latent_dim, self.output_dim),
        ] {
            for l in 0..layers {
                let fan_in = if l == 0 { input } else { self.width };
                let last = l + 1 == layers;
                let fan_out = if last { output } else { self.width };
                shapes.push((fan_in, fan_out, !last && self.layer_norm));
            }
        }
        shapes
    }

    /// Number of parameter tensors belonging to the encoder.
    fn psi_tensor_count(&self) -> usize {
        self.layer_shapes()[..self.psi_layers]
            .iter()
            .map(|&(_, _, norm)| if norm { 4 } else { 2 })
            .sum()
    }
}

/// Parameters of the split MLP, stored as a flat list in layer order:
/// weight, bias and (for normalized hidden layers) gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    config: NetworkConfig,
    tensors: Vec<Arc<Tensor>>,
}

impl PolicyParams {
    /// Uniform fan-in initialization with He bounds `sqrt(6 / fan_in)`,
    /// zero biases, unit gains.
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (fan_in, fan_out, norm) in config.layer_shapes() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Tensor::from_raw(vec![fan_out, fan_in], w));
            tensors.push(Tensor::zeros(&[fan_out]));
            if norm {
                tensors.push(Tensor::from_raw(vec![fan_out], vec![1.0; fan_out]));
                tensors.push(Tensor::zeros(&[fan_out]));
            }
        }
        Ok(PolicyParams {
            config,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    /// All weights and biases zero, gains one.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (fan_in, fan_out, norm) in config.layer_shapes() {
            tensors.push(Tensor::zeros(&[fan_out, fan_in]));
            tensors.push(Tensor::zeros(&[fan_out]));
            if norm {
                tensors.push(Tensor::from_raw(vec![fan_out], vec![1.0; fan_out]));
                tensors.push(Tensor::zeros(&[fan_out]));
            }
        }
        Ok(PolicyParams {
            config,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    /// Rebuilds parameters from a flat tensor list, checking every shape.
    pub fn from_tensors(config: NetworkConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Self::zeros(config.clone())?;
        if expected.tensors.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (e, t)) in expected.tensors.iter().zip(&tensors).enumerate() {
            if e.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {i} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter {i} has non-finite entries")));
            }
        }
        Ok(PolicyParams {
            config,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| &**t)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Handles for the eager evaluator.
    pub fn eager_handles(&self) -> Vec<Arc<Tensor>> {
        self.tensors.clone()
    }

    /// Records every tensor on `tape` as a parameter, in layer order.
    pub fn register(&self, tape: &mut crate::diffengine::Tape) -> Vec<crate::diffengine::NodeId> {
        self.tensors.iter().map(|t| tape.param((**t).clone())).collect()
    }

    /// Encoder pass over `graph` using parameter handles from
    /// [`PolicyParams::register`] or [`PolicyParams::eager_handles`].
    pub fn psi_on<G: Graph>(&self, g: &mut G, handles: &[G::Var], x: &G::Var) -> Result<G::Var> {
        let split = self.config.psi_tensor_count();
        let shapes = self.config.layer_shapes();
        run_layers(g, &shapes[..self.config.psi_layers], &handles[..split], x)
    }

    /// Decoder pass; the last layer is scaled by `output_scale`.
    pub fn phi_on<G: Graph>(&self, g: &mut G, handles: &[G::Var], y: &G::Var) -> Result<G::Var> {
        let split = self.config.psi_tensor_count();
        let shapes = self.config.layer_shapes();
        let out = run_layers(g, &shapes[self.config.psi_layers..], &handles[split..], y)?;
        Ok(if self.config.output_scale == 1.0 {
            out
        } else {
            g.scale(&out, self.config.output_scale)
        })
    }

    fn check_input(&self, x: &Tensor, dim: usize) -> Result<()> {
        if x.cols() != dim {
            return Err(Error::Dimension(format!("expected {dim} columns, got {}", x.cols())));
        }
        if !x.is_finite() {
            return Err(Error::Contract("network input must be finite".into()));
        }
        Ok(())
    }

    /// Latent embedding of every row of `x`.
    pub fn psi(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, self.config.input_dim)?;
        let handles = self.eager_handles();
        let y = self.psi_on(&mut Eager, &handles, &Arc::new(x.clone()))?;
        Ok(Arc::unwrap_or_clone(y))
    }

    /// Derivative (velocity or acceleration) for every latent row.
    pub fn phi(&self, y: &Tensor) -> Result<Tensor> {
        self.check_input(y, self.config.latent_dim)?;
        let handles = self.eager_handles();
        let out = self.phi_on(&mut Eager, &handles, &Arc::new(y.clone()))?;
        Ok(Arc::unwrap_or_clone(out))
    }

    /// Latent image of the goal under the current parameters.
    pub fn latent_goal(&self, goal: &[f64]) -> Result<Vec<f64>> {
        Ok(self.psi(&Tensor::vector(goal))?.into_data())
    }

    /// `(psi(x), phi(psi(x)))` for every row.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x, self.config.input_dim)?;
        let handles = self.eager_handles();
        let mut g = Eager;
        let y = self.psi_on(&mut g, &handles, &Arc::new(x.clone()))?;
        let f = self.phi_on(&mut g, &handles, &y)?;
        Ok((Arc::unwrap_or_clone(y), Arc::unwrap_or_clone(f)))
    }
}

fn run_layers<G: Graph>(
    g: &mut G,
    shapes: &[(usize, usize, bool)],
    handles: &[G::Var],
    x: &G::Var,
) -> Result<G::Var> {
    let mut h = x.clone();
    let mut k = 0;
    for (l, &(_, _, norm)) in shapes.iter().enumerate() {
        h = g.affine(&h, &handles[k], &handles[k + 1])?;
        k += 2;
        if norm {
            h = g.layer_norm(&h, &handles[k], &handles[k + 1])?;
            k += 2;
        }
        if l + 1 < shapes.len() {
            h = g.gelu(&h);
        }
    }
    Ok(h)
}

impl VectorField for PolicyParams {
    fn order(&self) -> Order {
        self.config.order
    }

    fn state_dim(&self) -> usize {
        self.config.input_dim
    }

    fn evaluate(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward(states)
    }

    fn latent(&self, states: &Tensor) -> Result<Tensor> {
        self.psi(states)
    }
}

/// Everything needed to reload and run a trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: NetworkConfig,
    pub params: Vec<Tensor>,
    pub scaling: Scaling,
    pub goal: Vec<f64>,
    pub manifold: ManifoldSpec,
    pub metric: LatentMetric,
    pub dt: f64,
}

impl Checkpoint {
    pub fn new(
        params: &PolicyParams,
        scaling: Scaling,
        goal: Vec<f64>,
        manifold: ManifoldSpec,
        metric: LatentMetric,
        dt: f64,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: params.config.clone(),
            params: params.tensors().cloned().collect(),
            scaling,
            goal,
            manifold,
            metric,
            dt,
        }
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        PolicyParams::from_tensors(self.config.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {}", ck.format)));
        }
        ck.manifold.validate()?;
        ck.metric.validate()?;
        if ck.goal.len() != ck.config.input_dim || ck.manifold.dim() != ck.config.input_dim {
            return Err(Error::Format("checkpoint goal/manifold/network dimensions disagree".into()));
        }
        ck.policy()?;
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
