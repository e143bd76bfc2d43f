//! Adam optimization of the combined loss.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_segments, TrajectoryDataset};
use crate::diffengine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{stability_eval, StabilityProtocol};
use crate::geometry::{sample_boundary, sample_uniform, LatentMetric};
use crate::losses::{total_loss, BoundaryBatch, LossBatches, LossConfig, LossValues, DEFAULT_BOUNDARY_WEIGHT};
use crate::network::{Checkpoint, NetworkConfig, Order, PolicyParams};

/// Abort threshold for the total loss.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Desk-scale network width, batch size and iteration count.
pub const DESK_WIDTH: usize = 32;
pub const DESK_BATCH: usize = 64;
pub const DESK_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Global gradient-norm cap applied before every Adam step.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Iterations between stability probes and periodic checkpoints; 0 disables both.
    pub eval_every: usize,
    /// Rollouts per stability probe.
    pub probe_count: usize,
    /// Steps per probe rollout.
    pub probe_steps: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Imitation only: no stability term and no boundary term.
    pub fn behavioral_cloning(mut self) -> Self {
        self.loss.lambda = 0.0;
        self.loss.boundary_weight = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("train.iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("train.adam_eps", "epsilon and clip must be positive"));
        }
        self.loss.validate()
    }
}

/// Named hyperparameter sets for each geometry and system order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "euc")]
    Euclidean,
    #[serde(rename = "sph")]
    Spherical,
    #[serde(rename = "euc-2nd")]
    EuclideanSecondOrder,
    #[serde(rename = "sph-2nd")]
    SphericalSecondOrder,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Euclidean,
        Preset::Spherical,
        Preset::EuclideanSecondOrder,
        Preset::SphericalSecondOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Euclidean => "euc",
            Preset::Spherical => "sph",
            Preset::EuclideanSecondOrder => "euc-2nd",
            Preset::SphericalSecondOrder => "sph-2nd",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}` (euc, sph, euc-2nd, sph-2nd)")))
    }

    pub fn order(self) -> Order {
        match self {
            Preset::Euclidean | Preset::Spherical => Order::First,
            _ => Order::Second,
        }
    }

    /// Preset matching a dataset's order and geometry.
    pub fn for_space(order: Order, spec: &crate::geometry::ManifoldSpec) -> Self {
        match (order, spec.is_box()) {
            (Order::First, true) => Preset::Euclidean,
            (Order::First, false) => Preset::Spherical,
            (Order::Second, true) => Preset::EuclideanSecondOrder,
            (Order::Second, false) => Preset::SphericalSecondOrder,
        }
    }

    /// `(margin, lambda, imitation window, stability window, learning rate)`.
    fn tuned(self) -> (f64, f64, usize, usize, f64) {
        match self {
            Preset::Euclidean => (5.921e-3, 1.315e-1, 13, 11, 9.784e-5),
            Preset::Spherical => (3.012e-5, 3.496, 13, 13, 8.574e-4),
            Preset::EuclideanSecondOrder => (2.424e-8, 1.022e-1, 14, 11, 1.670e-4),
            Preset::SphericalSecondOrder => (2.919e-7, 4.473e-1, 14, 11, 1.245e-4),
        }
    }

    /// Full-scale configuration: 40000 iterations, batches of 250.
    pub fn train_config(self, seed: u64) -> TrainConfig {
        let (margin, lambda, wi, ws, lr) = self.tuned();
        TrainConfig {
            iterations: 40_000,
            learning_rate: lr,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            grad_clip: 10.0,
            seed,
            loss: LossConfig {
                margin,
                lambda,
                boundary_weight: DEFAULT_BOUNDARY_WEIGHT,
                metric: LatentMetric::Euclidean,
                window_imitation: wi,
                window_stability: ws,
                batch_imitation: 250,
                batch_stability: 250,
            },
            eval_every: 1000,
            probe_count: 100,
            probe_steps: 1000,
            checkpoint: None,
        }
    }

    /// Preset values at desk scale: fewer iterations, smaller batches, no probes.
    pub fn desk_config(self, seed: u64) -> TrainConfig {
        let mut c = self.train_config(seed);
        c.iterations = DESK_ITERATIONS;
        c.loss.batch_imitation = DESK_BATCH;
        c.loss.batch_stability = DESK_BATCH;
        c.eval_every = 0;
        c
    }

    /// Network matching the preset's order for a state of `state_dim`.
    pub fn network_config(self, state_dim: usize) -> NetworkConfig {
        NetworkConfig::new(state_dim, self.order())
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(params: &PolicyParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts with the
    /// caller's iteration index and leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &[Tensor], lr: f64, iteration: usize) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.first.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration,
                reason: "non-finite gradient".into(),
            });
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so that their joint norm is at most `cap`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], cap: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > cap {
        let s = cap / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossValues,
}

/// Writes `iteration,imitation,stability,boundary,total`.
pub fn write_log_csv<W: Write>(rows: &[LogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,imitation,stability,boundary,total")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.loss.imitation, r.loss.stability, r.loss.boundary, r.loss.total
        )?;
    }
    Ok(())
}

/// Unsuccessful percentage of a periodic stability probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub iteration: usize,
    pub unsuccessful_pct: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub probes: Vec<ProbeResult>,
}

/// Generator for iteration `iteration` (stream 0 initializes the network).
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Draws the batches of one iteration.
pub fn sample_batches(
    dataset: &TrajectoryDataset,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBatches> {
    let segments = sample_segments(dataset, rng, loss.batch_imitation, loss.window_imitation)?;
    let stability_states = sample_uniform(&dataset.spec, rng, loss.batch_stability);
    let boundary = if loss.boundary_weight > 0.0 && dataset.spec.is_box() {
        let axes: Vec<usize> = (0..dataset.position_dim).collect();
        let (mut states, normals) = sample_boundary(&dataset.spec, &axes, rng, loss.batch_stability)?;
        if dataset.order == Order::Second {
            // Walls stop the normal velocity, so only states at rest along
            // the normal can stay on a face.
            let k = dataset.position_dim;
            for i in 0..states.rows() {
                for j in 0..k {
                    if normals.row(i)[j] != 0.0 {
                        states.row_mut(i)[k + j] = 0.0;
                    }
                }
            }
        }
        Some(BoundaryBatch { states, normals })
    } else {
        None
    };
    Ok(LossBatches {
        segments,
        stability_states,
        boundary,
    })
}

/// Trains a policy on `dataset`. `observer` sees every log row as it is
/// produced. The run is a pure function of the inputs and `config.seed`.
pub fn train(
    dataset: &TrajectoryDataset,
    network: &NetworkConfig,
    config: &TrainConfig,
    mut observer: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    network.validate()?;
    if network.order != dataset.order || network.input_dim != dataset.state_dim() {
        return Err(Error::config(
            "network",
            "order and input dimension must match the dataset",
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = PolicyParams::init(network.clone(), &mut init_rng)?;
    let mut adam = Adam::new(&params, config.betas[0], config.betas[1], config.adam_eps);
    let mut log = Vec::with_capacity(config.iterations);
    let mut probes = Vec::new();
    let snapshot = |p: &PolicyParams| {
        Checkpoint::new(
            p,
            dataset.scaling.clone(),
            dataset.goal.clone(),
            dataset.spec.clone(),
            config.loss.metric,
            dataset.dt,
        )
    };

    for it in 0..config.iterations {
        let mut rng = iteration_rng(config.seed, it);
        let batches = sample_batches(dataset, &config.loss, &mut rng)?;
        let mut tape = Tape::new();
        let handles = params.register(&mut tape);
        let nodes = total_loss(
            &params,
            &handles,
            &mut tape,
            &dataset.spec,
            &config.loss,
            &batches,
            &dataset.goal,
            dataset.dt,
        )?;
        let values = nodes.values(&tape);
        if !values.total.is_finite() || values.total > DIVERGENCE_LIMIT {
            return Err(Error::Training {
                iteration: it,
                reason: format!("loss diverged to {}", values.total),
            });
        }
        let mut grads = tape.backward(nodes.total)?.into_params();
        drop(tape);
        clip_global_norm(&mut grads, config.grad_clip);
        adam.step(&mut params, &grads, config.learning_rate, it)?;

        let row = LogRow {
            iteration: it,
            loss: values,
        };
        observer(&row);
        log.push(row);

        let done = it + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done < config.iterations {
            let protocol = StabilityProtocol {
                steps: config.probe_steps,
                count: config.probe_count,
                eps: crate::evaluation::default_eps(dataset),
            };
            let pct = stability_eval(&params, dataset, &protocol, config.seed)?;
            probes.push(ProbeResult {
                iteration: done,
                unsuccessful_pct: pct,
            });
            if let Some(path) = &config.checkpoint {
                snapshot(&params).save(path)?;
            }
        }
    }
    let checkpoint = snapshot(&params);
    if let Some(path) = &config.checkpoint {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome {
        params,
        checkpoint,
        log,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn tiny() -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        PolicyParams::init(NetworkConfig::new(2, Order::First).with_width(4), &mut rng).unwrap()
    }

    fn filled(p: &PolicyParams, v: f64) -> Vec<Tensor> {
        p.tensors()
            .map(|t| Tensor::new(t.shape().to_vec(), vec![v; t.len()]).unwrap())
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &filled(&before, 0.0), 1e-3, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let mut grads = filled(&before, 0.0);
        grads[0].data_mut()[0] = 3.0;
        grads[0].data_mut()[1] = -0.02;
        adam.step(&mut p, &grads, 1e-3, 0).unwrap();
        let d0 = p.tensors().next().unwrap().data()[0] - before.tensors().next().unwrap().data()[0];
        let d1 = p.tensors().next().unwrap().data()[1] - before.tensors().next().unwrap().data()[1];
        assert!((d0 + 1e-3).abs() < 1e-8);
        assert!((d1 - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let mut p = tiny();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let grads = filled(&p, 0.5);
        let mut last = 0.0;
        for it in 0..2000 {
            let before = p.tensors().next().unwrap().data()[0];
            adam.step(&mut p, &grads, 1e-3, it).unwrap();
            last = before - p.tensors().next().unwrap().data()[0];
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = tiny();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let mut grads = filled(&p, 0.0);
        grads[1].data_mut()[0] = f64::NAN;
        let err = adam.step(&mut p, &grads, 1e-3, 17).unwrap_err();
        assert!(matches!(err, Error::Training { iteration: 17, .. }));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::vector(&[30.0, 40.0]), Tensor::vector(&[0.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12 && (g[0].data()[1] - 8.0).abs() < 1e-12);
        let mut small = vec![Tensor::vector(&[1.0])];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small[0].data(), &[1.0]);
    }

    #[test]
    fn presets_carry_tuned_values() {
        let c = Preset::parse("euc").unwrap().train_config(0);
        assert_eq!((c.loss.margin, c.loss.lambda), (5.921e-3, 1.315e-1));
        assert_eq!((c.loss.window_imitation, c.loss.window_stability), (13, 11));
        assert_eq!(c.learning_rate, 9.784e-5);
        let s = Preset::parse("sph-2nd").unwrap().train_config(0);
        assert_eq!((s.loss.margin, s.loss.lambda, s.learning_rate), (2.919e-7, 4.473e-1, 1.245e-4));
        assert_eq!(Preset::parse("euc-2nd").unwrap().order(), Order::Second);
        assert!(Preset::parse("hyperbolic").is_err());
    }
}
