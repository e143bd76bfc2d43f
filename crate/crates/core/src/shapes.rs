//! Synthetic demonstration sets in the dataset file format.
//!
//! Every set has five demos of one reaching motion. The demos start from
//! perturbed initial states and share the final state exactly. Timing is an
//! exponential approach, so the speed near the goal is proportional to the
//! remaining distance. First-order demos start at moderate speed; the
//! second-order demo is longer and starts at rest to keep accelerations small.

use std::f64::consts::PI;

use crate::data::{DatasetFile, DATASET_FORMAT};
use crate::geometry::ManifoldSpec;
use crate::network::Order;

pub const DEMOS: usize = 5;
pub const DT: f64 = 0.02;

/// Sample count, approach rate per unit of normalized demo time, and the
/// weight of the linear term in the remaining-path profile (1 starts at rest).
#[derive(Clone, Copy, Debug)]
struct Timing {
    samples: usize,
    rate: f64,
    start_damping: f64,
}

impl Timing {
    /// Path parameter at normalized time `s`; `u(0) = 0`, `u(1) = 1`.
    fn at(self, s: f64) -> f64 {
        let a = self.rate;
        let rest = |s: f64| (-a * s).exp() * (1.0 + self.start_damping * a * s);
        (1.0 - rest(s)) / (1.0 - rest(1.0))
    }
}

/// Available shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// Planar sine wave, first order.
    Sine,
    /// Planar inward spiral, first order.
    Spiral,
    /// Self-intersecting planar figure-eight, second order.
    FigureEight,
    /// S-shaped motion on the unit 2-sphere, first order.
    SphereS,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sine, Shape::Spiral, Shape::FigureEight, Shape::SphereS];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sine => "sine",
            Shape::Spiral => "spiral",
            Shape::FigureEight => "figure-eight",
            Shape::SphereS => "sphere-s",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn order(self) -> Order {
        match self {
            Shape::FigureEight => Order::Second,
            _ => Order::First,
        }
    }

    /// Samples per demo.
    pub fn samples(self) -> usize {
        self.timing().samples
    }

    fn timing(self) -> Timing {
        match self {
            Shape::FigureEight => Timing {
                samples: 300,
                rate: 12.0,
                start_damping: 1.0,
            },
            _ => Timing {
                samples: 100,
                rate: 12.0,
                start_damping: 0.5,
            },
        }
    }

    /// Demonstrations in raw units.
    pub fn dataset(self) -> DatasetFile {
        let timing = self.timing();
        let demos = (0..DEMOS)
            .map(|d| {
                // Start perturbation in [-1, 1], spread evenly over the demos.
                let p = 2.0 * d as f64 / (DEMOS - 1) as f64 - 1.0;
                (0..timing.samples)
                    .map(|k| {
                        let s = k as f64 / (timing.samples - 1) as f64;
                        self.point(timing.at(s), p)
                    })
                    .collect()
            })
            .collect();
        let manifold = match self {
            Shape::SphereS => ManifoldSpec::sphere(3),
            _ => ManifoldSpec::Box {
                bounds: vec![[-100.0, 100.0]; 2],
            },
        };
        DatasetFile {
            format: DATASET_FORMAT,
            dt: DT,
            manifold,
            order: self.order(),
            demos,
        }
    }

    /// Point at path parameter `u` of the demo with perturbation `p`.
    fn point(self, u: f64, p: f64) -> Vec<f64> {
        let fade = 1.0 - u;
        match self {
            Shape::Sine => {
                let x = -60.0 + 60.0 * u;
                let y = 25.0 * (3.0 * PI * u).sin() * fade + 12.0 * p * fade;
                vec![x, y]
            }
            Shape::Spiral => {
                let r = (50.0 + 6.0 * p) * fade;
                let a = 0.6 * p + 3.0 * PI * u;
                vec![r * a.cos(), r * a.sin()]
            }
            Shape::FigureEight => {
                // Gerono lemniscate from (1, 0) through its double point, around
                // the left lobe and back to the double point.
                let t = PI / 2.0 + 1.5 * PI * u;
                let off = 0.15 * p * fade;
                let scale = 50.0;
                vec![scale * (t.sin() + off), scale * (t.sin() * t.cos() + 0.5 * off)]
            }
            Shape::SphereS => {
                // Planar S-curve lifted onto the sphere around the north pole.
                let a = 1.1 * fade + 0.15 * p * fade;
                let b = 0.5 * (2.0 * PI * u).sin() * fade;
                let n = (a * a + b * b + 1.0).sqrt();
                vec![a / n, b / n, 1.0 / n]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::prepare_dataset;

    #[test]
    fn every_shape_loads_with_a_shared_goal() {
        for shape in Shape::ALL {
            let ds = prepare_dataset(shape.dataset()).unwrap();
            assert_eq!(ds.demos.len(), DEMOS);
            assert!(ds.endpoint_spread().unwrap() < 1e-12, "{}", shape.name());
            assert_eq!(ds.order, shape.order());
        }
    }

    #[test]
    fn figure_eight_crosses_itself() {
        let f = Shape::FigureEight.dataset();
        let demo = &f.demos[2];
        // The unperturbed demo passes the double point at the origin with
        // nonzero velocity, then comes back to rest there.
        let near: Vec<usize> = (0..demo.len()).filter(|&k| demo[k][0].hypot(demo[k][1]) < 3.0).collect();
        let gaps = near.windows(2).filter(|w| w[1] - w[0] > 10).count();
        assert_eq!(gaps, 1, "{near:?}");
        assert_eq!(near[near.len() - 1], demo.len() - 1);
        let mid = near[0];
        let speed = (demo[mid + 1][0] - demo[mid][0]).hypot(demo[mid + 1][1] - demo[mid][1]);
        assert!(speed > 0.5, "{speed}");
    }

    #[test]
    fn sphere_demos_are_unit_norm() {
        for s in Shape::SphereS.dataset().demos.iter().flatten() {
            assert!((crate::diffengine::block_norm(s) - 1.0).abs() < 1e-12);
        }
    }
}
