//! Accuracy metrics, the stability protocol and plotting exports.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::diffengine::Tensor;
use crate::dynamics::{position_space, rollout, rollout_final, VectorField};
use crate::error::{Error, Result};
use crate::geometry::{sample_uniform, LatentMetric, ManifoldSpec};
use crate::losses::stability_terms;

/// Weight of the goal term in the hyper-score.
pub const HYPER_SCORE_GAMMA: f64 = 3.5;

/// Success threshold on spheres, in radians.
pub const SPHERE_EPS: f64 = 0.06;

/// Success threshold on boxes as a fraction of the workspace diagonal.
pub const BOX_EPS_FRACTION: f64 = 0.01;

/// Rows per batched rollout chunk; fixed so results do not depend on the
/// number of worker threads.
const CHUNK_ROWS: usize = 128;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Root mean squared state error between index-aligned trajectories.
pub fn rmse(sim: &[Vec<f64>], demo: &[Vec<f64>]) -> Result<f64> {
    if sim.len() != demo.len() || sim.is_empty() {
        return Err(Error::Contract(format!(
            "rmse needs equal nonempty lengths, got {} and {}",
            sim.len(),
            demo.len()
        )));
    }
    let sq: f64 = sim
        .iter()
        .zip(demo)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum();
    Ok((sq / sim.len() as f64).sqrt())
}

fn check_polylines(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("polylines must be nonempty".into()));
    }
    Ok(())
}

/// Dynamic time warping distance: the smallest sum of point distances over
/// monotone couplings.
pub fn dtw_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    coupling_dp(a, b, |prev, cost| prev + cost)
}

/// Discrete Fréchet distance: the smallest worst point distance over
/// monotone couplings.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    coupling_dp(a, b, f64::max)
}

fn coupling_dp(a: &[Vec<f64>], b: &[Vec<f64>], extend: impl Fn(f64, f64) -> f64) -> Result<f64> {
    check_polylines(a, b)?;
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let cost = euclidean(p, q);
            cur[j] = if i == 0 && j == 0 {
                cost
            } else {
                let mut best = prev[j];
                if j > 0 {
                    best = best.min(prev[j - 1]).min(cur[j - 1]);
                }
                extend(best, cost)
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Stability test: `count` uniform initial states, `steps` Euler steps each,
/// success when the final position lies within `eps` of the goal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProtocol {
    pub steps: usize,
    pub count: usize,
    pub eps: f64,
}

impl StabilityProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.count == 0 || !(self.eps > 0.0) {
            return Err(Error::config("protocol", "steps and count must be positive, eps > 0"));
        }
        Ok(())
    }
}

/// 1% of the workspace diagonal on boxes, 0.06 rad on spheres.
pub fn default_eps(dataset: &TrajectoryDataset) -> f64 {
    match dataset.position_spec() {
        spec @ ManifoldSpec::Box { .. } => BOX_EPS_FRACTION * spec.diagonal(),
        _ => SPHERE_EPS,
    }
}

/// Generator for the stability protocol's initial states.
fn protocol_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Final states of batched rollouts from every row of `initial`.
pub fn final_states<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    initial: &Tensor,
    steps: usize,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<&[f64]> = initial.iter_rows().collect();
    let chunks: Vec<Vec<Vec<f64>>> = rows
        .par_chunks(CHUNK_ROWS)
        .map(|chunk| {
            let batch = Tensor::from_rows(chunk)?;
            let last = rollout_final(field, spec, &batch, steps, dt)?;
            Ok(last.iter_rows().map(|r| r.to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Distances from the goal of the final positions of the protocol rollouts.
pub fn final_goal_distances<F: VectorField + ?Sized>(
    field: &F,
    dataset: &TrajectoryDataset,
    protocol: &StabilityProtocol,
    seed: u64,
) -> Result<Vec<f64>> {
    protocol.validate()?;
    let initial = sample_uniform(&dataset.spec, &mut protocol_rng(seed), protocol.count);
    let finals = final_states(field, &dataset.spec, &initial, protocol.steps, dataset.dt)?;
    let pos = position_space(&dataset.spec, dataset.order);
    let k = dataset.position_dim;
    finals
        .iter()
        .map(|x| pos.distance(&x[..k], &dataset.goal[..k]))
        .collect()
}

/// Percentage of protocol rollouts ending farther than `eps` from the goal.
pub fn stability_eval<F: VectorField + ?Sized>(
    field: &F,
    dataset: &TrajectoryDataset,
    protocol: &StabilityProtocol,
    seed: u64,
) -> Result<f64> {
    let d = final_goal_distances(field, dataset, protocol, seed)?;
    Ok(unsuccessful_pct(&d, protocol.eps))
}

pub fn unsuccessful_pct(distances: &[f64], eps: f64) -> f64 {
    let failed = distances.iter().filter(|d| !(**d <= eps)).count();
    100.0 * failed as f64 / distances.len() as f64
}

/// `acc + 3.5 * goal_dist`.
pub fn hyper_score(acc: f64, goal_dist: f64) -> f64 {
    acc + HYPER_SCORE_GAMMA * goal_dist
}

/// Fraction of `(initial state, step)` pairs whose latent distance to the
/// goal shrinks by at least `margin` in one step.
#[allow(clippy::too_many_arguments)]
pub fn triplet_satisfaction<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    metric: LatentMetric,
    goal: &[f64],
    initial: &Tensor,
    window: usize,
    margin: f64,
    dt: f64,
) -> Result<f64> {
    let terms = stability_terms(field, spec, metric, initial, goal, window, margin, dt)?;
    let total = terms.iter().map(|t| t.len()).sum::<usize>();
    let ok = terms.iter().flatten().filter(|h| **h == 0.0).count();
    Ok(ok as f64 / total as f64)
}

/// Per-demo values and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerDemo {
    pub per_demo: Vec<f64>,
    pub mean: f64,
}

impl PerDemo {
    fn new(per_demo: Vec<f64>) -> Self {
        let mean = per_demo.iter().sum::<f64>() / per_demo.len() as f64;
        PerDemo { per_demo, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: PerDemo,
    pub dtwd: PerDemo,
    pub frechet: PerDemo,
    /// Distance of each demo-start rollout's final position from the goal.
    pub goal_distance: PerDemo,
    pub unsuccessful_pct: f64,
    pub hyper_score: f64,
    pub protocol: StabilityProtocol,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Rollouts from every demo start, as long as the demo, in normalized units.
pub fn demo_rollouts<F: VectorField + ?Sized>(field: &F, dataset: &TrajectoryDataset) -> Result<Vec<Vec<Vec<f64>>>> {
    dataset
        .demos
        .par_iter()
        .map(|d| Ok(rollout(field, &dataset.spec, &d.states[0], d.len() - 1, dataset.dt)?.task_states))
        .collect()
}

/// Accuracy against the demonstrations (position blocks, index-aligned) and
/// the stability protocol.
pub fn evaluate<F: VectorField + ?Sized>(
    field: &F,
    dataset: &TrajectoryDataset,
    protocol: &StabilityProtocol,
    seed: u64,
) -> Result<EvalReport> {
    let k = dataset.position_dim;
    let positions = |t: &[Vec<f64>]| t.iter().map(|s| s[..k].to_vec()).collect::<Vec<_>>();
    let sims = demo_rollouts(field, dataset)?;
    let pos = dataset.position_spec();
    let (mut r, mut d, mut f, mut g) = (vec![], vec![], vec![], vec![]);
    for (sim, demo) in sims.iter().zip(&dataset.demos) {
        let (a, b) = (positions(sim), positions(&demo.states));
        r.push(rmse(&a, &b)?);
        d.push(dtw_distance(&a, &b)?);
        f.push(frechet_distance(&a, &b)?);
        g.push(pos.distance(&a[a.len() - 1], &dataset.goal[..k])?);
    }
    let unsuccessful = stability_eval(field, dataset, protocol, seed)?;
    let (rmse, goal_distance) = (PerDemo::new(r), PerDemo::new(g));
    Ok(EvalReport {
        hyper_score: hyper_score(rmse.mean, goal_distance.mean),
        rmse,
        dtwd: PerDemo::new(d),
        frechet: PerDemo::new(f),
        goal_distance,
        unsuccessful_pct: unsuccessful,
        protocol: *protocol,
        seed,
    })
}

/// Grid points and field values for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl FieldTable {
    /// CSV with columns `x_1..x_n, f_1..f_n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.points.first().map_or(0, |p| p.len());
        let header: Vec<String> = (1..=n)
            .map(|i| format!("x_{i}"))
            .chain((1..=n).map(|i| format!("f_{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (p, v) in self.points.iter().zip(&self.values) {
            let row: Vec<String> = p.iter().chain(v).map(|x| format!("{x}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Samples a first-order field on a `resolution x resolution` grid: a
/// cell-centred grid for planar boxes, a latitude/longitude grid for the
/// 2-sphere.
pub fn export_vector_field<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    resolution: usize,
) -> Result<FieldTable> {
    if resolution == 0 {
        return Err(Error::Contract("grid resolution must be positive".into()));
    }
    if field.order() != crate::network::Order::First || field.state_dim() != spec.dim() {
        return Err(Error::Contract("field export needs a first-order field on the given space".into()));
    }
    let cell = |k: usize| (k as f64 + 0.5) / resolution as f64;
    let mut points = Vec::with_capacity(resolution * resolution);
    match spec {
        ManifoldSpec::Box { bounds } if bounds.len() == 2 => {
            for j in 0..resolution {
                for i in 0..resolution {
                    points.push(vec![
                        bounds[0][0] + (bounds[0][1] - bounds[0][0]) * cell(i),
                        bounds[1][0] + (bounds[1][1] - bounds[1][0]) * cell(j),
                    ]);
                }
            }
        }
        ManifoldSpec::UnitSphere { dim: 3, radius } => {
            use std::f64::consts::PI;
            for j in 0..resolution {
                let polar = PI * cell(j);
                for i in 0..resolution {
                    let az = 2.0 * PI * cell(i);
                    points.push(vec![
                        radius * polar.sin() * az.cos(),
                        radius * polar.sin() * az.sin(),
                        radius * polar.cos(),
                    ]);
                }
            }
        }
        other => {
            return Err(Error::Contract(format!(
                "field export supports planar boxes and the 2-sphere, not a {}-dimensional {:?}",
                other.dim(),
                std::mem::discriminant(other)
            )))
        }
    }
    let grid = Tensor::from_rows(&points)?;
    let (_, values) = field.evaluate(&grid)?;
    Ok(FieldTable {
        points,
        values: values.iter_rows().map(|r| r.to_vec()).collect(),
    })
}

/// Self-contained SVG with field arrows and trajectories, drawn in the
/// plane of the first two coordinates.
pub fn field_svg(table: &FieldTable, trajectories: &[Vec<Vec<f64>>], goal: &[f64]) -> String {
    const SIZE: f64 = 600.0;
    let all = table.points.iter().chain(trajectories.iter().flatten());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all.chain(std::iter::once(&goal.to_vec())) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12) * 1.1;
    let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let map = |p: &[f64]| {
        (
            SIZE / 2.0 + (p[0] - centre[0]) / span * SIZE,
            SIZE / 2.0 - (p[1] - centre[1]) / span * SIZE,
        )
    };
    let longest = table
        .values
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
        .fold(0.0, f64::max)
        .max(1e-12);
    let res = (table.points.len() as f64).sqrt().max(1.0);
    let arrow = SIZE / res * 0.8;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g stroke="gray" stroke-width="1">"#);
    for (p, v) in table.points.iter().zip(&table.values) {
        let (x0, y0) = map(p);
        let len = (v[0] * v[0] + v[1] * v[1]).sqrt() / longest * arrow;
        let angle = (-v[1]).atan2(v[0]);
        let (x1, y1) = (x0 + len * angle.cos(), y0 + len * angle.sin());
        let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}"/>"#);
        let _ = writeln!(s, r#"<circle cx="{x1:.2}" cy="{y1:.2}" r="1.2" fill="gray"/>"#);
    }
    let _ = writeln!(s, "</g>");
    for t in trajectories {
        let pts: Vec<String> = t
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="2"/>"#,
            pts.join(" ")
        );
    }
    let (gx, gy) = map(goal);
    let _ = writeln!(s, r#"<circle cx="{gx:.2}" cy="{gy:.2}" r="5" fill="black"/>"#);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::dynamics::{BistableField, LinearField};
    use crate::network::{NetworkConfig, Order, PolicyParams};

    /// Every monotone coupling from `(0, 0)` to `(n-1, m-1)`, as index lists.
    fn couplings(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
        fn walk(i: usize, j: usize, n: usize, m: usize, path: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            path.push((i, j));
            if i + 1 == n && j + 1 == m {
                out.push(path.clone());
            } else {
                if i + 1 < n {
                    walk(i + 1, j, n, m, path, out);
                }
                if j + 1 < m {
                    walk(i, j + 1, n, m, path, out);
                }
                if i + 1 < n && j + 1 < m {
                    walk(i + 1, j + 1, n, m, path, out);
                }
            }
            path.pop();
        }
        let mut out = Vec::new();
        walk(0, 0, n, m, &mut Vec::new(), &mut out);
        out
    }

    fn point_dist(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    fn brute_dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        couplings(a.len(), b.len())
            .iter()
            .map(|c| c.iter().fold(0.0, |acc, &(i, j)| acc + point_dist(&a[i], &b[j])))
            .fold(f64::INFINITY, f64::min)
    }

    fn brute_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        couplings(a.len(), b.len())
            .iter()
            .map(|c| c.iter().map(|&(i, j)| point_dist(&a[i], &b[j])).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min)
    }

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn rmse_examples() {
        let a = pts(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = pts(&[&[0.3, 0.4], &[1.3, 1.4]]);
        assert!((rmse(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let c = pts(&[&[0.0], &[0.0], &[0.0], &[0.0]]);
        let d = pts(&[&[1.0], &[0.0], &[0.0], &[0.0]]);
        assert_eq!(rmse(&c, &d).unwrap(), 0.5);
        assert!(matches!(rmse(&a, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn coupling_examples() {
        let a = pts(&[&[0.0], &[1.0]]);
        let b = pts(&[&[0.0], &[1.0], &[1.0]]);
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw_distance(&a, &b).unwrap(), 0.0);
        assert_eq!(frechet_distance(&b, &b).unwrap(), 0.0);
        let top = pts(&[&[0.0, 1.0], &[0.5, 1.0], &[1.0, 1.0]]);
        let bottom = pts(&[&[0.0, 0.0], &[0.5, 0.0], &[1.0, 0.0]]);
        assert_eq!(frechet_distance(&top, &bottom).unwrap(), 1.0);
    }

    fn polyline(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = rng.gen_range(1..=6);
        (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn dynamic_programs_equal_brute_force_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (a, b) = (polyline(&mut rng), polyline(&mut rng));
            assert_eq!(dtw_distance(&a, &b).unwrap().to_bits(), brute_dtw(&a, &b).to_bits());
            assert_eq!(frechet_distance(&a, &b).unwrap().to_bits(), brute_frechet(&a, &b).to_bits());
        }
    }

    proptest! {
        #[test]
        fn coupling_distance_properties(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (polyline(&mut rng), polyline(&mut rng));
            let f = frechet_distance(&a, &b).unwrap();
            let ends = point_dist(&a[0], &b[0]).max(point_dist(&a[a.len() - 1], &b[b.len() - 1]));
            prop_assert!(f >= ends);
            prop_assert_eq!(f, frechet_distance(&b, &a).unwrap());
            let d = dtw_distance(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, dtw_distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn hyper_score_examples() {
        assert_eq!(hyper_score(0.0, 0.0), 0.0);
        assert_eq!(hyper_score(1.0, 0.0), 1.0);
        assert!((hyper_score(0.2, 0.1) - 0.55).abs() < 1e-15);
    }

    fn planar_task(goal: Vec<f64>) -> TrajectoryDataset {
        TrajectoryDataset {
            demos: vec![crate::data::Demonstration {
                states: vec![vec![0.5, 0.5], goal.clone()],
            }],
            spec: ManifoldSpec::cube(2, 1.0),
            goal,
            scaling: crate::data::Scaling::identity(2),
            order: Order::First,
            dt: 0.05,
            position_dim: 2,
        }
    }

    #[test]
    fn globally_stable_field_has_no_failures() {
        let task = planar_task(vec![0.2, -0.1]);
        let field = LinearField { rate: -1.0, goal: task.goal.clone() };
        let protocol = StabilityProtocol { steps: 400, count: 300, eps: 0.01 };
        assert_eq!(stability_eval(&field, &task, &protocol, 3).unwrap(), 0.0);
    }

    #[test]
    fn spurious_attractor_fails_half_the_box() {
        // Basin of (1, 0) is x0 > 0: exactly half of the square.
        let task = planar_task(vec![1.0, 0.0]);
        let protocol = StabilityProtocol { steps: 600, count: 2000, eps: 0.01 };
        let pct = stability_eval(&BistableField, &task, &protocol, 4).unwrap();
        // Binomial standard deviation at p = 0.5, n = 2000 is about 1.1 points.
        assert!((pct - 50.0).abs() < 4.5, "{pct}");
    }

    #[test]
    fn stability_eval_is_deterministic_and_monotone_in_eps() {
        let task = planar_task(vec![1.0, 0.0]);
        let protocol = StabilityProtocol { steps: 50, count: 300, eps: 0.05 };
        let d1 = final_goal_distances(&BistableField, &task, &protocol, 9).unwrap();
        let d2 = final_goal_distances(&BistableField, &task, &protocol, 9).unwrap();
        assert_eq!(d1, d2);
        let mut last = 100.0;
        for eps in [0.001, 0.01, 0.1, 0.5, 1.0, 3.0] {
            let p = unsuccessful_pct(&d1, eps);
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn field_export_shapes() {
        let spec = ManifoldSpec::cube(2, 1.0);
        let p = PolicyParams::zeros(NetworkConfig::new(2, Order::First).with_width(4)).unwrap();
        let t = export_vector_field(&p, &spec, 10).unwrap();
        assert_eq!(t.points.len(), 100);
        assert!(t.values.iter().all(|v| v == &t.values[0]));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 101);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 4);

        let sphere = ManifoldSpec::sphere(3);
        let field = LinearField { rate: -1.0, goal: vec![0.0, 0.0, 1.0] };
        let t = export_vector_field(&field, &sphere, 6).unwrap();
        for p in &t.points {
            assert!((crate::diffengine::block_norm(p) - 1.0).abs() <= 1e-9);
        }
        let cube3 = ManifoldSpec::cube(3, 1.0);
        let f3 = LinearField { rate: -1.0, goal: vec![0.0; 3] };
        assert!(matches!(export_vector_field(&f3, &cube3, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn triplet_satisfaction_of_linear_decay() {
        // With identity latents, one step of x' = (1 - dt) x shrinks |x| by dt |x|.
        let spec = ManifoldSpec::cube(1, 1.0);
        let field = LinearField { rate: -1.0, goal: vec![0.0] };
        let x0 = Tensor::from_rows(&[[0.5], [-0.8]]).unwrap();
        let all = triplet_satisfaction(&field, &spec, LatentMetric::Euclidean, &[0.0], &x0, 3, 0.01, 0.1).unwrap();
        assert_eq!(all, 1.0);
        let none = triplet_satisfaction(&field, &spec, LatentMetric::Euclidean, &[0.0], &x0, 3, 1.0, 0.1).unwrap();
        assert_eq!(none, 0.0);
    }
}
