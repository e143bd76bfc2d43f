//! State-space manifolds, latent metrics, projections and sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffengine::{block_norm, ProjectionBlock, Tensor};
use crate::error::{Error, Result};

/// Relative face band used by [`boundary_normal`] for states exactly on the boundary.
pub const EXACT_FACE_BAND: f64 = 1e-6;

fn default_radius() -> f64 {
    1.0
}

/// The task space a system evolves in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldSpec {
    /// Axis-aligned box, one `[lo, hi]` pair per axis.
    Box { bounds: Vec<[f64; 2]> },
    /// Sphere of the given radius embedded in `R^dim`.
    UnitSphere {
        dim: usize,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// Cartesian product; factors occupy consecutive coordinate blocks.
    Product { factors: Vec<ManifoldSpec> },
}

impl ManifoldSpec {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        ManifoldSpec::Box {
            bounds: vec![[-half_width, half_width]; dim],
        }
    }

    pub fn sphere(dim: usize) -> Self {
        ManifoldSpec::UnitSphere { dim, radius: 1.0 }
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        match self {
            ManifoldSpec::Box { bounds } => bounds.len(),
            ManifoldSpec::UnitSphere { dim, .. } => *dim,
            ManifoldSpec::Product { factors } => factors.iter().map(|f| f.dim()).sum(),
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, ManifoldSpec::Box { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ManifoldSpec::Box { bounds } => {
                if bounds.is_empty() {
                    return Err(Error::config("manifold.bounds", "box needs at least one axis"));
                }
                for (i, [lo, hi]) in bounds.iter().enumerate() {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::config(
                            format!("manifold.bounds[{i}]"),
                            format!("need finite lo < hi, got [{lo}, {hi}]"),
                        ));
                    }
                }
            }
            ManifoldSpec::UnitSphere { dim, radius } => {
                if *dim < 2 {
                    return Err(Error::config("manifold.dim", "sphere needs ambient dim >= 2"));
                }
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::config("manifold.radius", "radius must be positive"));
                }
            }
            ManifoldSpec::Product { factors } => {
                if factors.is_empty() {
                    return Err(Error::config("manifold.factors", "product needs factors"));
                }
                for f in factors {
                    f.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Flattened list of `(offset, leaf factor)` pairs.
    pub fn leaves(&self) -> Vec<(usize, &ManifoldSpec)> {
        fn walk<'a>(spec: &'a ManifoldSpec, offset: &mut usize, out: &mut Vec<(usize, &'a ManifoldSpec)>) {
            match spec {
                ManifoldSpec::Product { factors } => {
                    for f in factors {
                        walk(f, offset, out);
                    }
                }
                leaf => {
                    out.push((*offset, leaf));
                    *offset += leaf.dim();
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut 0, &mut out);
        out
    }

    /// Row-wise projection plan consumed by the projection kernel.
    pub fn projection_plan(&self) -> Vec<ProjectionBlock> {
        self.leaves()
            .into_iter()
            .map(|(start, leaf)| match leaf {
                ManifoldSpec::Box { bounds } => ProjectionBlock::Clip {
                    start,
                    lo: bounds.iter().map(|b| b[0]).collect(),
                    hi: bounds.iter().map(|b| b[1]).collect(),
                },
                ManifoldSpec::UnitSphere { dim, radius } => ProjectionBlock::Sphere {
                    start,
                    len: *dim,
                    radius: *radius,
                },
                ManifoldSpec::Product { .. } => unreachable!("leaves are never products"),
            })
            .collect()
    }

    /// Length of the longest straight segment inside the space.
    pub fn diagonal(&self) -> f64 {
        match self {
            ManifoldSpec::Box { bounds } => bounds
                .iter()
                .map(|[lo, hi]| (hi - lo) * (hi - lo))
                .sum::<f64>()
                .sqrt(),
            ManifoldSpec::UnitSphere { radius, .. } => 2.0 * radius,
            ManifoldSpec::Product { factors } => factors
                .iter()
                .map(|f| f.diagonal().powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Intrinsic state distance: Euclidean on boxes, great-circle on spheres,
    /// sum of factor distances on products.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dim(self.dim(), a.len())?;
        check_dim(self.dim(), b.len())?;
        let mut total = 0.0;
        for (start, leaf) in self.leaves() {
            let end = start + leaf.dim();
            total += match leaf {
                ManifoldSpec::UnitSphere { radius, .. } => distance(
                    &LatentMetric::GreatCircle { radius: *radius },
                    &a[start..end],
                    &b[start..end],
                )?,
                _ => euclidean(&a[start..end], &b[start..end]),
            };
        }
        Ok(total)
    }

    /// Whether `x` lies in the space (box bounds inclusive, sphere norm within `tol`).
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        self.leaves().into_iter().all(|(start, leaf)| match leaf {
            ManifoldSpec::Box { bounds } => bounds
                .iter()
                .zip(&x[start..])
                .all(|([lo, hi], v)| *v >= *lo && *v <= *hi),
            ManifoldSpec::UnitSphere { dim, radius } => {
                (block_norm(&x[start..start + dim]) - radius).abs() <= tol
            }
            ManifoldSpec::Product { .. } => unreachable!(),
        })
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension(format!("expected dimension {expected}, got {got}")));
    }
    Ok(())
}

/// Distance used by the stability loss in latent space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentMetric {
    Euclidean,
    GreatCircle { radius: f64 },
}

impl LatentMetric {
    pub fn validate(&self) -> Result<()> {
        if let LatentMetric::GreatCircle { radius } = self {
            if !(*radius > 0.0) || !radius.is_finite() {
                return Err(Error::config("metric.radius", "radius must be positive"));
            }
        }
        Ok(())
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cosine of the central angle, clamped to `[-1, 1]`.
pub(crate) fn clamped_cosine(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let na = block_norm(a);
    let nb = block_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("great-circle distance of the zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(((dot / (na * nb)).clamp(-1.0, 1.0), na, nb))
}

/// Distance between two latent (or ambient) vectors under `metric`.
///
/// Great-circle inputs are normalized onto the metric's sphere first, so the
/// result is `radius * angle`.
pub fn distance(metric: &LatentMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    match metric {
        LatentMetric::Euclidean => Ok(euclidean(a, b)),
        LatentMetric::GreatCircle { radius } => {
            let (c, _, _) = clamped_cosine(a, b)?;
            Ok(radius * c.acos())
        }
    }
}

/// Projects a single state onto the space.
pub fn project(spec: &ManifoldSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec.dim(), x.len())?;
    let (y, _) = crate::diffengine::kernels::project(&spec.projection_plan(), &Tensor::vector(x))?;
    Ok(y.into_data())
}

/// Outward unit normal of a box at a boundary state.
///
/// Faces within `band * (hi - lo)` of `x` contribute; at corners the face
/// normals are summed and re-normalized.
pub fn boundary_normal(spec: &ManifoldSpec, x: &[f64], band: f64) -> Result<Vec<f64>> {
    let ManifoldSpec::Box { bounds } = spec else {
        return Err(Error::Contract("boundary normals are defined for boxes only".into()));
    };
    check_dim(bounds.len(), x.len())?;
    let mut n = vec![0.0; x.len()];
    for (i, ([lo, hi], v)) in bounds.iter().zip(x).enumerate() {
        let tol = band * (hi - lo);
        if (v - hi).abs() <= tol {
            n[i] += 1.0;
        } else if (v - lo).abs() <= tol {
            n[i] -= 1.0;
        }
    }
    let norm = block_norm(&n);
    if norm == 0.0 {
        return Err(Error::Domain(format!("{x:?} is not on the box boundary")));
    }
    Ok(n.into_iter().map(|v| v / norm).collect())
}

/// Uniform samples from the space, one per row.
pub fn sample_uniform<R: Rng + ?Sized>(spec: &ManifoldSpec, rng: &mut R, count: usize) -> Tensor {
    let dim = spec.dim();
    let leaves = spec.leaves();
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        for (_, leaf) in &leaves {
            match leaf {
                ManifoldSpec::Box { bounds } => {
                    for [lo, hi] in bounds {
                        data.push(lo + (hi - lo) * rng.gen::<f64>());
                    }
                }
                ManifoldSpec::UnitSphere { dim, radius } => {
                    let v = loop {
                        let v: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
                        let n = block_norm(&v);
                        if n > 1e-12 {
                            break v.into_iter().map(|c| c * (radius / n)).collect::<Vec<_>>();
                        }
                    };
                    data.extend(v);
                }
                ManifoldSpec::Product { .. } => unreachable!(),
            }
        }
    }
    Tensor::from_raw(vec![count, dim], data)
}

/// Samples uniformly (by face area) on the faces of a box orthogonal to `axes`.
///
/// Returns the states and their outward normals.
pub fn sample_boundary<R: Rng + ?Sized>(
    spec: &ManifoldSpec,
    axes: &[usize],
    rng: &mut R,
    count: usize,
) -> Result<(Tensor, Tensor)> {
    let ManifoldSpec::Box { bounds } = spec else {
        return Err(Error::Contract("boundary sampling needs a box".into()));
    };
    if axes.is_empty() || axes.iter().any(|&a| a >= bounds.len()) {
        return Err(Error::Contract(format!("invalid boundary axes {axes:?}")));
    }
    let widths: Vec<f64> = bounds.iter().map(|[lo, hi]| hi - lo).collect();
    let areas: Vec<f64> = axes
        .iter()
        .map(|&a| {
            widths
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != a)
                .map(|(_, w)| w)
                .product()
        })
        .collect();
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let dim = bounds.len();
    let mut states = Vec::with_capacity(count * dim);
    let mut normals = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let mut pick = rng.gen::<f64>() * total;
        let mut face = (axes[axes.len() - 1], true);
        'outer: for (&axis, &area) in axes.iter().zip(&areas) {
            for upper in [false, true] {
                if pick < area {
                    face = (axis, upper);
                    break 'outer;
                }
                pick -= area;
            }
        }
        for (i, [lo, hi]) in bounds.iter().enumerate() {
            if i == face.0 {
                states.push(if face.1 { *hi } else { *lo });
                normals.push(if face.1 { 1.0 } else { -1.0 });
            } else {
                states.push(lo + (hi - lo) * rng.gen::<f64>());
                normals.push(0.0);
            }
        }
    }
    Ok((
        Tensor::from_raw(vec![count, dim], states),
        Tensor::from_raw(vec![count, dim], normals),
    ))
}

/// Regular grid of `per_face` points on every face orthogonal to `axes`.
pub fn boundary_grid(spec: &ManifoldSpec, axes: &[usize], per_face: usize) -> Result<(Tensor, Tensor)> {
    let ManifoldSpec::Box { bounds } = spec else {
        return Err(Error::Contract("boundary grids need a box".into()));
    };
    if bounds.len() != 2 {
        // Higher-dimensional faces would need a tensor-product grid.
        return Err(Error::Contract("boundary grids are implemented for planar boxes".into()));
    }
    let mut states = Vec::new();
    let mut normals = Vec::new();
    for &axis in axes {
        let other = 1 - axis;
        let [olo, ohi] = bounds[other];
        for upper in [false, true] {
            for k in 0..per_face {
                let s = (k as f64 + 0.5) / per_face as f64;
                let mut x = [0.0; 2];
                let mut n = [0.0; 2];
                x[axis] = if upper { bounds[axis][1] } else { bounds[axis][0] };
                n[axis] = if upper { 1.0 } else { -1.0 };
                x[other] = olo + (ohi - olo) * s;
                states.extend_from_slice(&x);
                normals.extend_from_slice(&n);
            }
        }
    }
    let rows = states.len() / 2;
    Ok((
        Tensor::from_raw(vec![rows, 2], states),
        Tensor::from_raw(vec![rows, 2], normals),
    ))
}
