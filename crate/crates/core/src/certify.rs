//! Empirical class-KL certificate for a learned system.
//!
//! Initial states are grouped into shells of equal latent distance `d0` to
//! the latent goal. Along every rollout the latent distance `delta(y0, t)` is
//! recorded, its one-step window maximum is maximized over each shell to give
//! `delta_max(d0, t)`, and a bound `beta(d0, t)` is obtained by integrating
//! `dz/dt = alpha (z - delta_max)` from `z0 = delta_max(d0, 0) + d0`. The
//! checks below are evaluated on the sampled grid only, so a passing report is
//! evidence, not proof.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::dynamics::{rollout_batch, VectorField};
use crate::error::{Error, Result};
use crate::geometry::{distance, sample_uniform, LatentMetric, ManifoldSpec};

/// Slack for the strict monotonicity checks.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// `beta(d0, T_end)` must fall to this fraction of `beta(d0, 0)`.
pub const VANISH_FRACTION: f64 = 0.05;

/// Minimum fraction of sampled steps with strictly decreasing `delta`.
pub const SURROGATE_RATE_THRESHOLD: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationConfig {
    /// Rate of the bounding system; negative.
    pub alpha: f64,
    pub dt: f64,
    /// Horizon `T_end` in seconds.
    pub horizon: f64,
    /// Strictly increasing shell radii. A leading zero adds the goal shell.
    pub d0_grid: Vec<f64>,
    /// Shells with fewer members are flagged as under-sampled.
    pub shell_samples: usize,
    /// Relative shell half-width.
    pub shell_tol: f64,
    /// Uniform task-space draws used to populate the shells.
    pub candidates: usize,
    /// At most this many members are kept per shell.
    pub max_members: usize,
    pub metric: LatentMetric,
    pub seed: u64,
}

impl CertificationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha < 0.0) {
            return Err(Error::config("certify.alpha", "must be negative"));
        }
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) {
            return Err(Error::config("certify.dt", "need 0 < dt <= horizon"));
        }
        if self.d0_grid.is_empty()
            || self.d0_grid.iter().any(|d| !(*d >= 0.0) || !d.is_finite())
            || self.d0_grid.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::config("certify.d0_grid", "must be nonnegative and strictly increasing"));
        }
        if self.shell_samples < 10 {
            return Err(Error::config("certify.shell_samples", "must be at least 10"));
        }
        if !(self.shell_tol > 0.0) {
            return Err(Error::config("certify.shell_tol", "must be positive"));
        }
        self.metric.validate()
    }

    /// Number of Euler steps covering the horizon.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Initial task states grouped by the latent distance of their image.
#[derive(Clone, Debug, PartialEq)]
pub struct Shells {
    pub d0: Vec<f64>,
    pub members: Vec<Vec<Vec<f64>>>,
}

impl Shells {
    pub fn under_sampled(&self, minimum: usize) -> Vec<bool> {
        self.members.iter().map(|m| m.len() < minimum).collect()
    }
}

/// Latent distance of every row of `states` to `psi(goal)`.
pub fn latent_distances<F: VectorField + ?Sized>(
    field: &F,
    metric: LatentMetric,
    goal: &[f64],
    states: &Tensor,
) -> Result<Vec<f64>> {
    let yg = field.latent(&Tensor::new(vec![1, goal.len()], goal.to_vec())?)?;
    field
        .latent(states)?
        .iter_rows()
        .map(|y| distance(&metric, y, yg.row(0)))
        .collect()
}

/// Assigns candidate states to every shell whose radius lies within
/// `tol * d0` of their latent distance. The zero shell holds the goal only.
pub fn bin_shells(
    candidates: &Tensor,
    distances: &[f64],
    goal: &[f64],
    grid: &[f64],
    tol: f64,
    max_members: usize,
) -> Shells {
    let members = grid
        .iter()
        .map(|&d0| {
            if d0 == 0.0 {
                return vec![goal.to_vec()];
            }
            candidates
                .iter_rows()
                .zip(distances)
                .filter(|(_, d)| (**d - d0).abs() <= tol * d0)
                .map(|(x, _)| x.to_vec())
                .take(max_members)
                .collect()
        })
        .collect();
    Shells {
        d0: grid.to_vec(),
        members,
    }
}

/// Zero followed by `count` radii evenly spaced between the 10th and 90th
/// percentiles of `distances`.
pub fn auto_d0_grid(distances: &[f64], count: usize) -> Vec<f64> {
    let mut d: Vec<f64> = distances.iter().copied().filter(|v| v.is_finite()).collect();
    d.sort_by(f64::total_cmp);
    if d.is_empty() || count == 0 {
        return vec![0.0];
    }
    let q = |p: f64| d[((d.len() - 1) as f64 * p).round() as usize];
    let (lo, hi) = (q(0.1), q(0.9));
    let mut grid = vec![0.0];
    for i in 0..count {
        let v = if count == 1 { lo } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 };
        if v > *grid.last().unwrap() {
            grid.push(v);
        }
    }
    grid
}

/// Draws uniform task states, maps them through the latent encoder and bins them.
pub fn sample_shells<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    goal: &[f64],
    config: &CertificationConfig,
) -> Result<Shells> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let candidates = sample_uniform(spec, &mut rng, config.candidates.max(1));
    let d = latent_distances(field, config.metric, goal, &candidates)?;
    Ok(bin_shells(&candidates, &d, goal, &config.d0_grid, config.shell_tol, config.max_members))
}

/// Latent distance to the goal along the rollout from each initial state:
/// `series[i][k] = delta(y0_i, k dt)` for `k = 0..=steps`.
pub fn delta_series<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    metric: LatentMetric,
    goal: &[f64],
    initial: &[Vec<f64>],
    steps: usize,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    if initial.is_empty() {
        return Ok(Vec::new());
    }
    let states = rollout_batch(field, spec, &Tensor::from_rows(initial)?, steps, dt)?;
    let per_step: Vec<Vec<f64>> = states
        .par_iter()
        .map(|x| latent_distances(field, metric, goal, x))
        .collect::<Result<_>>()?;
    Ok((0..initial.len())
        .map(|i| per_step.iter().map(|row| row[i]).collect())
        .collect())
}

/// Maximum of `series` over the window `[t_k, t_{k+1}]`.
pub fn delta_max_window(series: &[f64], k: usize) -> Result<f64> {
    if k + 1 >= series.len() {
        return Err(Error::Contract(format!(
            "window starting at step {k} leaves a series of {} samples",
            series.len()
        )));
    }
    Ok(series[k].max(series[k + 1]))
}

/// `delta_max(d0, t_k)` over the members of one shell, for every window start.
pub fn delta_max(shell_series: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = shell_series.first() else {
        return Ok(Vec::new());
    };
    let windows = first.len().saturating_sub(1);
    (0..windows)
        .map(|k| {
            shell_series
                .iter()
                .map(|s| delta_max_window(s, k))
                .try_fold(0.0f64, |acc, v| v.map(|v| acc.max(v)))
        })
        .collect()
}

/// Forward-Euler solution of `dz/dt = alpha (z - delta_max)` from
/// `delta_max[0] + d0`, on the grid of `delta_max`.
pub fn beta(d0: f64, delta_max: &[f64], alpha: f64, dt: f64) -> Result<Vec<f64>> {
    if !(alpha < 0.0) {
        return Err(Error::config("certify.alpha", "must be negative"));
    }
    let Some(&first) = delta_max.first() else {
        return Ok(Vec::new());
    };
    let mut z = first + d0;
    Ok(delta_max
        .iter()
        .map(|dm| {
            let out = z;
            z += dt * alpha * (z - dm);
            out
        })
        .collect())
}

/// Outcome and worst-case margin of one check. Positive margins pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellSummary {
    pub d0: f64,
    pub members: usize,
    pub under_sampled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    /// Always "empirical": only sampled states and grid times are checked.
    pub kind: String,
    pub config: CertificationConfig,
    pub shells: Vec<ShellSummary>,
    /// Grid times `t_k` of the surfaces.
    pub times: Vec<f64>,
    /// `delta_max_surface[shell][k]`.
    pub delta_max_surface: Vec<Vec<f64>>,
    /// `beta_surface[shell][k]`.
    pub beta_surface: Vec<Vec<f64>>,
    /// `delta_surface[shell][member][k]` on the same grid.
    pub delta_surface: Vec<Vec<Vec<f64>>>,
    pub surrogate_rate: f64,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl CertificationReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// `d0,t,delta_max,beta` for every shell and grid time.
    pub fn write_surfaces_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "d0,t,delta_max,beta")?;
        for (s, shell) in self.shells.iter().enumerate() {
            for (k, t) in self.times.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    shell.d0, t, self.delta_max_surface[s][k], self.beta_surface[s][k]
                )?;
            }
        }
        Ok(())
    }
}

/// Builds the surfaces from per-shell delta series and evaluates the checks.
pub fn verify(config: &CertificationConfig, shells: &Shells, series: Vec<Vec<Vec<f64>>>) -> Result<CertificationReport> {
    config.validate()?;
    let mut warnings = Vec::new();
    let summaries: Vec<ShellSummary> = shells
        .d0
        .iter()
        .zip(&shells.members)
        .map(|(&d0, m)| ShellSummary {
            d0,
            members: m.len(),
            under_sampled: m.len() < config.shell_samples && d0 > 0.0,
        })
        .collect();
    for s in &summaries {
        if s.members == 0 {
            warnings.push(format!("shell d0 = {} is empty and was skipped", s.d0));
        } else if s.under_sampled {
            warnings.push(format!(
                "shell d0 = {} has {} members (< {}); its values are low-confidence",
                s.d0, s.members, config.shell_samples
            ));
        }
    }

    let mut dmax = Vec::new();
    let mut betas = Vec::new();
    for (s, shell_series) in series.iter().enumerate() {
        let dm = delta_max(shell_series)?;
        betas.push(beta(shells.d0[s], &dm, config.alpha, config.dt)?);
        dmax.push(dm);
    }
    let windows = dmax.iter().map(|d| d.len()).max().unwrap_or(0);
    let times: Vec<f64> = (0..windows).map(|k| k as f64 * config.dt).collect();
    let populated: Vec<usize> = (0..series.len()).filter(|&s| !series[s].is_empty()).collect();

    // (a) delta <= beta for every member and grid time.
    let mut bound = f64::INFINITY;
    for &s in &populated {
        for member in &series[s] {
            for (k, b) in betas[s].iter().enumerate() {
                bound = bound.min(b - member[k]);
            }
        }
    }
    // (b) beta nonincreasing in time; strictly for d0 > 0.
    let mut time_dec = f64::INFINITY;
    for &s in &populated {
        for w in betas[s].windows(2) {
            let drop = w[0] - w[1];
            time_dec = time_dec.min(if shells.d0[s] > 0.0 { drop } else { drop + MONOTONE_SLACK });
        }
    }
    // (c) beta strictly increasing in d0 at every time.
    let mut d0_inc = f64::INFINITY;
    for pair in populated.windows(2) {
        for (lo, hi) in betas[pair[0]].iter().zip(&betas[pair[1]]) {
            d0_inc = d0_inc.min(hi - lo);
        }
    }
    // (d) beta(d0, T_end) <= 0.05 beta(d0, 0) for d0 > 0.
    let mut vanish = f64::INFINITY;
    for &s in &populated {
        if shells.d0[s] > 0.0 {
            let b = &betas[s];
            vanish = vanish.min(VANISH_FRACTION * b[0] - b[b.len() - 1]);
        }
    }
    // (e) fraction of sampled steps with strictly decreasing delta, goal shell excluded.
    let (mut decreasing, mut total) = (0usize, 0usize);
    for &s in &populated {
        if shells.d0[s] == 0.0 {
            continue;
        }
        for member in &series[s] {
            for w in member.windows(2) {
                total += 1;
                decreasing += (w[0] > w[1]) as usize;
            }
        }
    }
    let rate = if total == 0 { 0.0 } else { decreasing as f64 / total as f64 };

    let check = |name: &str, margin: f64, passed: bool| Check {
        name: name.to_string(),
        passed,
        margin,
    };
    let checks = vec![
        check("bound_holds", bound, bound >= 0.0),
        check("beta_time_decreasing", time_dec, time_dec > -MONOTONE_SLACK),
        check("beta_d0_increasing", d0_inc, d0_inc > -MONOTONE_SLACK && populated.len() >= 2),
        check("beta_vanishes", vanish, vanish >= 0.0),
        check(
            "surrogate_condition_rate",
            rate - SURROGATE_RATE_THRESHOLD,
            total > 0 && rate >= SURROGATE_RATE_THRESHOLD,
        ),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(CertificationReport {
        kind: "empirical".into(),
        config: config.clone(),
        shells: summaries,
        times,
        delta_max_surface: dmax,
        beta_surface: betas,
        delta_surface: series,
        surrogate_rate: rate,
        checks,
        warnings,
        passed,
    })
}

/// Samples shells, rolls them out over the horizon and verifies the bound.
pub fn certify<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    goal: &[f64],
    config: &CertificationConfig,
) -> Result<CertificationReport> {
    config.validate()?;
    let shells = sample_shells(field, spec, goal, config)?;
    certify_shells(field, spec, goal, config, &shells)
}

/// As [`certify`] with caller-supplied shells.
pub fn certify_shells<F: VectorField + ?Sized>(
    field: &F,
    spec: &ManifoldSpec,
    goal: &[f64],
    config: &CertificationConfig,
    shells: &Shells,
) -> Result<CertificationReport> {
    let steps = config.steps();
    let series = shells
        .members
        .iter()
        .map(|m| delta_series(field, spec, config.metric, goal, m, steps, config.dt))
        .collect::<Result<Vec<_>>>()?;
    verify(config, shells, series)
}

/// Scalar linear system `dy/dt = rate * y` with identity latent, whose
/// shells hold exactly `-d0` and `+d0`.
pub mod fixtures {
    use super::*;
    use crate::dynamics::LinearField;

    /// Box large enough that the unstable fixture grows freely for a while.
    pub const HALF_WIDTH: f64 = 10.0;

    pub fn field(rate: f64) -> LinearField {
        LinearField { rate, goal: vec![0.0] }
    }

    pub fn spec() -> ManifoldSpec {
        ManifoldSpec::cube(1, HALF_WIDTH)
    }

    pub fn config() -> CertificationConfig {
        CertificationConfig {
            alpha: -1.0,
            dt: 1e-3,
            horizon: 6.0,
            d0_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            shell_samples: 10,
            shell_tol: 0.05,
            candidates: 0,
            max_members: 64,
            metric: LatentMetric::Euclidean,
            seed: 0,
        }
    }

    /// Shells built from the exact candidates `±d0`.
    pub fn shells(grid: &[f64]) -> Shells {
        let rows: Vec<[f64; 1]> = grid.iter().flat_map(|&d| [[-d], [d]]).filter(|r| r[0] != 0.0).collect();
        let candidates = Tensor::from_rows(&rows).expect("grid has a positive radius");
        let distances: Vec<f64> = rows.iter().map(|r| r[0].abs()).collect();
        // Exact radii: a zero-width bin keeps only the two exact members.
        let mut shells = bin_shells(&candidates, &distances, &[0.0], grid, 0.0, usize::MAX);
        for (d0, m) in shells.d0.iter().zip(&mut shells.members) {
            if *d0 > 0.0 {
                m.retain(|x| x[0].abs() == *d0);
            }
        }
        shells
    }

    /// Report for `dy/dt = rate * y` under the default fixture config.
    pub fn report(rate: f64) -> Result<CertificationReport> {
        let config = config();
        certify_shells(&field(rate), &spec(), &[0.0], &config, &shells(&config.d0_grid))
    }

    /// Continuous solution of `dz/dt = alpha (z - d0 e^{-kappa t})` from
    /// `z0 = 2 d0`, where `d0 e^{-kappa t}` interpolates the Euler decay
    /// `d0 (1 - dt)^k`.
    pub fn beta_closed_form(d0: f64, t: f64, alpha: f64, dt: f64) -> f64 {
        let kappa = -(1.0 - dt).ln() / dt;
        let a = alpha * d0 / (alpha + kappa);
        let z0 = 2.0 * d0;
        a * (-kappa * t).exp() + (z0 - a) * (alpha * t).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn window_max_examples() {
        assert_eq!(delta_max_window(&[3.0, 2.0, 1.0], 0).unwrap(), 3.0);
        assert_eq!(delta_max_window(&[1.0, 3.0, 2.0], 0).unwrap(), 3.0);
        assert_eq!(delta_max_window(&[1.0, 3.0, 2.0], 1).unwrap(), 3.0);
        assert!(matches!(delta_max_window(&[1.0, 3.0], 1), Err(Error::Contract(_))));
        assert_eq!(delta_max(&[vec![0.5, 0.2, 0.1]]).unwrap(), vec![0.5, 0.2]);
        assert_eq!(delta_max(&[vec![0.0; 4]]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta(0.0, &[0.0; 5], -1.0, 0.1).unwrap(), vec![0.0; 5]);
        // Constant delta_max = c: z_k = c + d0 (1 + alpha dt)^k.
        let b = beta(0.5, &[0.2; 50], -1.0, 0.01).unwrap();
        for (k, v) in b.iter().enumerate() {
            assert!((v - (0.2 + 0.5 * 0.99f64.powi(k as i32))).abs() < 1e-12);
        }
        assert!(matches!(beta(0.5, &[0.2], 0.0, 0.01), Err(Error::Config { .. })));
    }

    #[test]
    fn shells_of_the_linear_fixture() {
        let s = shells(&[0.0, 0.5]);
        assert_eq!(s.members[0], vec![vec![0.0]]);
        let mut half = s.members[1].clone();
        half.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(half, vec![vec![-0.5], vec![0.5]]);
    }

    #[test]
    fn binning_respects_the_tolerance() {
        let c = Tensor::from_rows(&[[0.1], [0.48], [0.5], [0.53], [0.9]]).unwrap();
        let d = vec![0.1, 0.48, 0.5, 0.53, 0.9];
        let s = bin_shells(&c, &d, &[0.0], &[0.5], 0.05, 10);
        assert_eq!(s.members[0], vec![vec![0.48], vec![0.5]]);
    }

    #[test]
    fn delta_of_linear_decay_is_geometric() {
        let c = config();
        let series = delta_series(&field(-1.0), &spec(), c.metric, &[0.0], &[vec![0.8], vec![0.0]], 500, c.dt).unwrap();
        for (k, v) in series[0].iter().enumerate() {
            assert!((v - 0.8 * (1.0 - c.dt).powi(k as i32)).abs() < 1e-12);
        }
        assert!(series[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.alpha = 0.5;
        assert!(c.validate().is_err());
        let mut c = config();
        c.d0_grid = vec![0.5, 0.25];
        assert!(c.validate().is_err());
    }
}
