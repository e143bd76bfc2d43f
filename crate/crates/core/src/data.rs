//! Demonstration files, normalization, goal extraction and segment sampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{block_norm, Tensor};
use crate::error::{Error, Result};
use crate::geometry::ManifoldSpec;
use crate::network::Order;

pub const DATASET_FORMAT: u32 = 1;

/// Demonstrations are mapped into `[-MARGIN_EXTENT, MARGIN_EXTENT]` per axis,
/// leaving a 5% margin inside the unit box.
pub const MARGIN_EXTENT: f64 = 0.95;

/// Endpoint tolerance as a fraction of the workspace diagonal.
pub const GOAL_TOLERANCE_FRACTION: f64 = 0.02;

/// Velocity bounds of a second-order box extend this far past the fastest
/// demonstrated speed on each axis.
pub const VELOCITY_HEADROOM: f64 = 1.2;

const SPHERE_RENORMALIZE_TOL: f64 = 1e-6;

/// The on-disk dataset document. States are row-major; timestamps are `k * dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format: u32,
    pub dt: f64,
    pub manifold: ManifoldSpec,
    pub order: Order,
    pub demos: Vec<Vec<Vec<f64>>>,
}

impl DatasetFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-axis affine map `normalized = (raw - offset) * gain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub offset: Vec<f64>,
    pub gain: Vec<f64>,
}

impl Scaling {
    pub fn identity(dim: usize) -> Self {
        Scaling {
            offset: vec![0.0; dim],
            gain: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.offset.iter().zip(&self.gain))
            .map(|(v, (o, g))| (v - o) * g)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.offset.iter().zip(&self.gain))
            .map(|(v, (o, g))| v / g + o)
            .collect()
    }

    /// Map of the data range onto `[-MARGIN_EXTENT, MARGIN_EXTENT]` per axis.
    /// Degenerate axes are centred with unit gain.
    fn fit(points: impl Iterator<Item = Vec<f64>>, dim: usize) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for i in 0..dim {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let offset: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let gain = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let half = 0.5 * (h - l);
                if half > 0.0 {
                    MARGIN_EXTENT / half
                } else {
                    1.0
                }
            })
            .collect();
        Scaling { offset, gain }
    }

    /// Stacked position/velocity scaling: velocities share the position gain
    /// and have no offset.
    fn stacked(&self) -> Self {
        let mut offset = self.offset.clone();
        offset.extend(std::iter::repeat(0.0).take(self.dim()));
        let mut gain = self.gain.clone();
        gain.extend_from_slice(&self.gain);
        Scaling { offset, gain }
    }
}

/// One demonstration in normalized coordinates (full state, including
/// velocities for second-order data).
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub states: Vec<Vec<f64>>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn timestamps(&self, dt: f64) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * dt).collect()
    }
}

/// Normalized demonstrations with their state space and goal.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub demos: Vec<Demonstration>,
    /// Working state space after normalization (stacked for second order).
    pub spec: ManifoldSpec,
    pub goal: Vec<f64>,
    pub scaling: Scaling,
    pub order: Order,
    pub dt: f64,
    /// Dimension of the position block.
    pub position_dim: usize,
}

impl TrajectoryDataset {
    pub fn state_dim(&self) -> usize {
        self.spec.dim()
    }

    /// Position block of the working space.
    pub fn position_spec(&self) -> ManifoldSpec {
        crate::dynamics::position_space(&self.spec, self.order)
    }

    /// Largest distance from a demo endpoint to the goal.
    pub fn endpoint_spread(&self) -> Result<f64> {
        let pos = self.position_spec();
        let goal = &self.goal[..self.position_dim];
        let mut spread: f64 = 0.0;
        for demo in &self.demos {
            let end = &demo.states[demo.len() - 1][..self.position_dim];
            spread = spread.max(pos.distance(end, goal)?);
        }
        Ok(spread)
    }

    /// Goal tolerance: 2% of the position workspace diagonal.
    pub fn goal_tolerance(&self) -> f64 {
        GOAL_TOLERANCE_FRACTION * self.position_spec().diagonal()
    }

    pub fn shortest_demo(&self) -> usize {
        self.demos.iter().map(|d| d.len()).min().unwrap_or(0)
    }
}

/// Central differences inside, one-sided at the ends, zero at the final state.
pub fn derive_velocities(states: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = states.len();
    let dim = states.first().map_or(0, |s| s.len());
    (0..n)
        .map(|k| {
            if k + 1 == n {
                return vec![0.0; dim];
            }
            let (a, b, span) = if k == 0 {
                (&states[0], &states[1], dt)
            } else {
                (&states[k - 1], &states[k + 1], 2.0 * dt)
            };
            a.iter().zip(b).map(|(p, q)| (q - p) / span).collect()
        })
        .collect()
}

/// Loads and normalizes a dataset file.
pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    prepare_dataset(DatasetFile::read(path)?)
}

/// Validates a parsed dataset document and maps it into the working space.
pub fn prepare_dataset(file: DatasetFile) -> Result<TrajectoryDataset> {
    if file.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {}", file.format)));
    }
    if !(file.dt > 0.0) || !file.dt.is_finite() {
        return Err(Error::Format(format!("dt must be positive, got {}", file.dt)));
    }
    file.manifold.validate()?;
    if file.demos.is_empty() {
        return Err(Error::Format("dataset holds no demonstrations".into()));
    }
    let pos_dim = file.manifold.dim();
    let with_velocity = file.order == Order::Second
        && file.demos[0].first().map_or(false, |s| s.len() == 2 * pos_dim);
    let row_dim = if with_velocity { 2 * pos_dim } else { pos_dim };
    for (d, demo) in file.demos.iter().enumerate() {
        if demo.len() < 2 {
            return Err(Error::Format(format!("demo {d} has fewer than two states")));
        }
        for (k, s) in demo.iter().enumerate() {
            if s.len() != row_dim {
                return Err(Error::Format(format!(
                    "demo {d} state {k} has {} entries, expected {row_dim}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("demo {d} state {k} is not finite")));
            }
        }
    }

    let (pos_spec, pos_scaling, mut demos) = match &file.manifold {
        ManifoldSpec::Box { .. } => {
            let scaling = Scaling::fit(
                file.demos.iter().flatten().map(|s| s[..pos_dim].to_vec()),
                pos_dim,
            );
            let demos: Vec<Vec<Vec<f64>>> = file
                .demos
                .iter()
                .map(|d| {
                    d.iter()
                        .map(|s| {
                            let mut p = scaling.normalize(&s[..pos_dim]);
                            if with_velocity {
                                p.extend(s[pos_dim..].iter().zip(&scaling.gain).map(|(v, g)| v * g));
                            }
                            p
                        })
                        .collect()
                })
                .collect();
            (ManifoldSpec::cube(pos_dim, 1.0), scaling, demos)
        }
        ManifoldSpec::UnitSphere { radius, .. } => {
            let mut demos = file.demos.clone();
            for (d, demo) in demos.iter_mut().enumerate() {
                for (k, s) in demo.iter_mut().enumerate() {
                    let norm = block_norm(&s[..pos_dim]);
                    if (norm - radius).abs() > SPHERE_RENORMALIZE_TOL * radius {
                        return Err(Error::Format(format!(
                            "demo {d} state {k} has norm {norm}, not on the radius-{radius} sphere"
                        )));
                    }
                    for v in &mut s[..pos_dim] {
                        *v *= radius / norm;
                    }
                }
            }
            (file.manifold.clone(), Scaling::identity(pos_dim), demos)
        }
        ManifoldSpec::Product { .. } => {
            return Err(Error::Format(
                "product manifolds are assembled internally; files give the position space".into(),
            ))
        }
    };

    let (spec, scaling) = match file.order {
        Order::First => (pos_spec, pos_scaling),
        Order::Second => {
            if !with_velocity {
                for demo in &mut demos {
                    let vel = derive_velocities(demo, file.dt);
                    for (s, v) in demo.iter_mut().zip(vel) {
                        s.extend(v);
                    }
                }
            }
            let mut vmax = vec![0.0f64; pos_dim];
            for s in demos.iter().flatten() {
                for i in 0..pos_dim {
                    vmax[i] = vmax[i].max(s[pos_dim + i].abs());
                }
            }
            let vel_bounds: Vec<[f64; 2]> = vmax
                .iter()
                .map(|v| {
                    let b = (VELOCITY_HEADROOM * v).max(1e-3);
                    [-b, b]
                })
                .collect();
            let spec = match pos_spec {
                ManifoldSpec::Box { mut bounds } => {
                    bounds.extend(vel_bounds);
                    ManifoldSpec::Box { bounds }
                }
                sphere => ManifoldSpec::Product {
                    factors: vec![sphere, ManifoldSpec::Box { bounds: vel_bounds }],
                },
            };
            (spec, pos_scaling.stacked())
        }
    };

    let state_dim = spec.dim();
    let mut goal = vec![0.0; state_dim];
    for demo in &demos {
        for (g, v) in goal.iter_mut().zip(&demo[demo.len() - 1]) {
            *g += v / demos.len() as f64;
        }
    }
    if file.order == Order::Second {
        goal[pos_dim..].iter_mut().for_each(|v| *v = 0.0);
    }
    let goal = crate::geometry::project(&spec, &goal)?;

    let dataset = TrajectoryDataset {
        demos: demos.into_iter().map(|states| Demonstration { states }).collect(),
        spec,
        goal,
        scaling,
        order: file.order,
        dt: file.dt,
        position_dim: pos_dim,
    };
    let spread = dataset.endpoint_spread()?;
    let tolerance = dataset.goal_tolerance();
    if spread > tolerance {
        return Err(Error::GoalConsistency { spread, tolerance });
    }
    Ok(dataset)
}

/// Converts plain CSV rows `demo,t,x_1..x_n` into a dataset document.
///
/// Rows of one demo must be contiguous and evenly spaced in time; a header
/// line is skipped if its first field is not numeric.
pub fn convert_csv(text: &str, manifold: Option<ManifoldSpec>, order: Order) -> Result<DatasetFile> {
    let mut demos: Vec<(String, Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!("line {}: need demo, t and coordinates", line_no + 1)));
        }
        let parsed: std::result::Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse::<f64>()).collect();
        let Ok(values) = parsed else {
            if line_no == 0 {
                continue;
            }
            return Err(Error::Format(format!("line {}: non-numeric field", line_no + 1)));
        };
        let id = fields[0].to_string();
        match demos.last_mut() {
            Some((last, ts, states)) if *last == id => {
                ts.push(values[0]);
                states.push(values[1..].to_vec());
            }
            _ => demos.push((id, vec![values[0]], vec![values[1..].to_vec()])),
        }
    }
    if demos.is_empty() {
        return Err(Error::Format("no demonstration rows".into()));
    }
    let mut dt = None;
    for (id, ts, _) in &demos {
        for w in ts.windows(2) {
            let step = w[1] - w[0];
            let reference = *dt.get_or_insert(step);
            if !(step > 0.0) || (step - reference).abs() > 1e-9 * reference.abs() {
                return Err(Error::Format(format!(
                    "demo {id}: timestamps are not uniform ({step} vs {reference})"
                )));
            }
        }
    }
    let dt = dt.ok_or_else(|| Error::Format("every demo has a single sample".into()))?;
    let dim = demos[0].2[0].len();
    let manifold = match manifold {
        Some(m) => m,
        None => {
            let mut bounds = vec![[f64::INFINITY, f64::NEG_INFINITY]; dim];
            for s in demos.iter().flat_map(|d| &d.2) {
                for (b, v) in bounds.iter_mut().zip(s) {
                    b[0] = b[0].min(*v);
                    b[1] = b[1].max(*v);
                }
            }
            for b in &mut bounds {
                if b[0] == b[1] {
                    b[0] -= 1.0;
                    b[1] += 1.0;
                }
            }
            ManifoldSpec::Box { bounds }
        }
    };
    Ok(DatasetFile {
        format: DATASET_FORMAT,
        dt,
        manifold,
        order,
        demos: demos.into_iter().map(|d| d.2).collect(),
    })
}

/// A batch of demonstration slices, aligned step by step for batched rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    /// Initial states, one row per segment.
    pub initial: Tensor,
    /// `targets[k]` holds the labels for step `k + 1` of every segment.
    pub targets: Vec<Tensor>,
    /// `mask[k][i]` is 1 when segment `i` has a label at step `k + 1`.
    pub mask: Vec<Vec<f64>>,
    /// `(demo, start)` of every segment.
    pub origins: Vec<(usize, usize)>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of labelled (segment, step) pairs.
    pub fn label_count(&self) -> usize {
        self.mask.iter().flatten().filter(|w| **w > 0.0).count()
    }

    /// Steps needed to cover the longest segment.
    pub fn horizon(&self) -> usize {
        self.targets.len()
    }
}

/// Draws `batch` segments: a demo uniformly, then a start index uniformly
/// within it. Segments near the end keep their natural length.
pub fn sample_segments<R: Rng + ?Sized>(
    dataset: &TrajectoryDataset,
    rng: &mut R,
    batch: usize,
    window: usize,
) -> Result<SegmentBatch> {
    if dataset.demos.is_empty() || batch == 0 {
        return Err(Error::Contract("segment sampling needs demos and a positive batch".into()));
    }
    if window == 0 || window > dataset.shortest_demo() {
        return Err(Error::Contract(format!(
            "window {window} must lie in 1..={}",
            dataset.shortest_demo()
        )));
    }
    let dim = dataset.state_dim();
    let origins: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            let d = rng.gen_range(0..dataset.demos.len());
            (d, rng.gen_range(0..dataset.demos[d].len()))
        })
        .collect();
    let horizon = origins
        .iter()
        .map(|&(d, s)| window.min(dataset.demos[d].len() - 1 - s))
        .max()
        .unwrap_or(0);
    let mut initial = Vec::with_capacity(batch * dim);
    let mut targets = vec![Vec::with_capacity(batch * dim); horizon];
    let mut mask = vec![vec![0.0; batch]; horizon];
    for (i, &(d, s)) in origins.iter().enumerate() {
        let states = &dataset.demos[d].states;
        initial.extend_from_slice(&states[s]);
        for k in 0..horizon {
            match states.get(s + k + 1).filter(|_| k < window) {
                Some(label) => {
                    targets[k].extend_from_slice(label);
                    mask[k][i] = 1.0;
                }
                None => targets[k].extend_from_slice(&states[states.len() - 1]),
            }
        }
    }
    Ok(SegmentBatch {
        initial: Tensor::new(vec![batch, dim], initial)?,
        targets: targets
            .into_iter()
            .map(|t| Tensor::new(vec![batch, dim], t))
            .collect::<Result<_>>()?,
        mask,
        origins,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn file(demos: Vec<Vec<Vec<f64>>>, manifold: ManifoldSpec, order: Order) -> DatasetFile {
        DatasetFile {
            format: DATASET_FORMAT,
            dt: 0.1,
            manifold,
            order,
            demos,
        }
    }

    fn line(from: [f64; 2], to: [f64; 2], n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let s = k as f64 / (n - 1) as f64;
                vec![from[0] + s * (to[0] - from[0]), from[1] + s * (to[1] - from[1])]
            })
            .collect()
    }

    fn box100() -> ManifoldSpec {
        ManifoldSpec::Box {
            bounds: vec![[0.0, 100.0]; 2],
        }
    }

    #[test]
    fn goal_is_shared_endpoint() {
        let ds = prepare_dataset(file(
            vec![line([0.0, 0.0], [50.0, 50.0], 11), line([100.0, 20.0], [50.0, 50.0], 11)],
            box100(),
            Order::First,
        ))
        .unwrap();
        let end = ds.scaling.normalize(&[50.0, 50.0]);
        for (g, e) in ds.goal.iter().zip(&end) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(ds.endpoint_spread().unwrap(), 0.0);
    }

    #[test]
    fn box_data_is_normalized_with_margin() {
        let ds = prepare_dataset(file(
            vec![line([0.0, 0.0], [100.0, 100.0], 21), line([0.0, 100.0], [100.0, 100.0], 21)],
            box100(),
            Order::First,
        ))
        .unwrap();
        for s in ds.demos.iter().flat_map(|d| &d.states) {
            assert!(s.iter().all(|v| v.abs() <= MARGIN_EXTENT + 1e-12));
        }
        assert_eq!(ds.spec, ManifoldSpec::cube(2, 1.0));
    }

    #[test]
    fn off_sphere_state_is_rejected() {
        let demo = vec![vec![0.9, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let err = prepare_dataset(file(vec![demo], ManifoldSpec::sphere(3), Order::First));
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn inconsistent_goals_are_rejected() {
        let err = prepare_dataset(file(
            vec![line([0.0, 0.0], [50.0, 50.0], 5), line([0.0, 0.0], [90.0, 50.0], 5)],
            box100(),
            Order::First,
        ));
        assert!(matches!(err, Err(Error::GoalConsistency { .. })));
    }

    #[test]
    fn velocity_examples() {
        let pos = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        let flat = |v: Vec<Vec<f64>>| v.into_iter().map(|r| r[0]).collect::<Vec<_>>();
        assert_eq!(flat(derive_velocities(&pos(&[0.0, 1.0, 2.0]), 1.0)), vec![1.0, 1.0, 0.0]);
        assert_eq!(flat(derive_velocities(&pos(&[3.0; 4]), 1.0)), vec![0.0; 4]);
        assert_eq!(
            flat(derive_velocities(&pos(&[0.0, 1.0, 2.0, 3.0]), 0.5)),
            vec![2.0, 2.0, 2.0, 0.0]
        );
    }

    #[test]
    fn second_order_stacks_velocities() {
        let ds = prepare_dataset(file(
            vec![line([0.0, 0.0], [50.0, 50.0], 11), line([100.0, 0.0], [50.0, 50.0], 11)],
            box100(),
            Order::Second,
        ))
        .unwrap();
        assert_eq!(ds.state_dim(), 4);
        assert_eq!(&ds.goal[2..], &[0.0, 0.0]);
        for s in ds.demos.iter().flat_map(|d| &d.states) {
            assert!(ds.spec.contains(s, 0.0));
        }
        assert_eq!(ds.position_spec(), ManifoldSpec::cube(2, 1.0));
    }

    #[test]
    fn segment_sampling() {
        let ds = prepare_dataset(file(
            vec![line([0.0, 0.0], [50.0, 50.0], 8), line([100.0, 0.0], [50.0, 50.0], 8)],
            box100(),
            Order::First,
        ))
        .unwrap();
        let a = sample_segments(&ds, &mut ChaCha8Rng::seed_from_u64(1), 64, 3).unwrap();
        let b = sample_segments(&ds, &mut ChaCha8Rng::seed_from_u64(1), 64, 3).unwrap();
        assert_eq!(a, b);
        for (i, &(d, s)) in a.origins.iter().enumerate() {
            let states = &ds.demos[d].states;
            assert_eq!(a.initial.row(i), &states[s][..]);
            for k in 0..a.horizon() {
                if a.mask[k][i] > 0.0 {
                    assert_eq!(a.targets[k].row(i), &states[s + k + 1][..]);
                } else {
                    assert!(s + k + 1 >= states.len());
                }
            }
        }
        let single = sample_segments(&ds, &mut ChaCha8Rng::seed_from_u64(2), 16, 1).unwrap();
        assert!(single.horizon() <= 1);
        assert!(sample_segments(&ds, &mut ChaCha8Rng::seed_from_u64(2), 4, 99).is_err());
    }

    #[test]
    fn final_state_segments_carry_no_labels() {
        let ds = prepare_dataset(file(vec![line([0.0, 0.0], [1.0, 1.0], 2)], box100(), Order::First)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_segments(&ds, &mut rng, 200, 1).unwrap();
        let degenerate = b.origins.iter().filter(|o| o.1 == 1).count();
        assert!(degenerate > 0);
        assert_eq!(b.label_count(), 200 - degenerate);
    }

    #[test]
    fn csv_conversion_checks_timestamps() {
        let good = "demo,t,x,y\na,0,0,0\na,0.5,1,1\na,1.0,2,2\nb,0,4,0\nb,0.5,2,2\n";
        let f = convert_csv(good, None, Order::First).unwrap();
        assert_eq!(f.dt, 0.5);
        assert_eq!(f.demos.len(), 2);
        let bad = "a,0,0,0\na,0.5,1,1\na,1.1,2,2\n";
        assert!(matches!(convert_csv(bad, None, Order::First), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn normalization_round_trip(
            offset in prop::collection::vec(-1e3..1e3f64, 3),
            gain in prop::collection::vec(1e-3..1e3f64, 3),
            x in prop::collection::vec(-1e3..1e3f64, 3),
        ) {
            let s = Scaling { offset, gain };
            let back = s.denormalize(&s.normalize(&x));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
