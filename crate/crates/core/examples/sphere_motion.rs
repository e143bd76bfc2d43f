//! Learns a motion on the unit sphere. Rollouts stay on the sphere by
//! construction; the example checks the norms and the goal distance.
//!
//! `cargo run --release --example sphere_motion -- [iterations]`

use puma::data::prepare_dataset;
use puma::dynamics::rollout_batch;
use puma::geometry::sample_uniform;
use puma::shapes::Shape;
use puma::training::{train, Preset, DESK_ITERATIONS, DESK_WIDTH};
use rand::SeedableRng;

fn main() -> puma::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(DESK_ITERATIONS);
    let dataset = prepare_dataset(Shape::SphereS.dataset())?;
    let mut config = Preset::Spherical.desk_config(7);
    config.iterations = iterations;
    let network = Preset::Spherical.network_config(3).with_width(DESK_WIDTH);
    let outcome = train(&dataset, &network, &config, |_| {})?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let starts = sample_uniform(&dataset.spec, &mut rng, 200);
    let states = rollout_batch(&outcome.params, &dataset.spec, &starts, 2000, dataset.dt)?;
    let drift = states
        .iter()
        .flat_map(|t| t.iter_rows().map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let last = states.last().expect("at least the start");
    let worst = last
        .iter_rows()
        .map(|r| dataset.spec.distance(r, &dataset.goal))
        .collect::<puma::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("max |norm - 1| over {} states: {drift:.1e}", states.len() * starts.rows());
    println!("largest final great-circle distance to the goal: {worst:.4} rad");
    Ok(())
}
