//! Stable motion primitives learned from demonstrations.
//!
//! A policy `f(x) = phi(psi(x))` is trained to imitate demonstrated motions
//! while a triplet loss in the latent space of `psi` makes every trajectory
//! approach the goal. Euclidean boxes, spheres and their products are
//! supported as state spaces, for first- and second-order systems.

pub mod certify;
pub mod cli;
pub mod data;
pub mod diffengine;
pub mod dynamics;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod shapes;
pub mod training;

pub use error::{Error, Result};
