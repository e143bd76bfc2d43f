//! Same data, same seed: the stable policy against plain imitation.
//!
//! `cargo run --release --example behavioral_cloning -- [shape] [iterations]`

use puma::data::prepare_dataset;
use puma::evaluation::{default_eps, final_goal_distances, StabilityProtocol};
use puma::shapes::Shape;
use puma::training::{train, Preset, DESK_ITERATIONS, DESK_WIDTH};

fn main() -> puma::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let shape = args.first().and_then(|s| Shape::parse(s)).unwrap_or(Shape::Spiral);
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(DESK_ITERATIONS);

    let dataset = prepare_dataset(shape.dataset())?;
    let preset = Preset::for_space(dataset.order, &dataset.spec);
    let network = preset.network_config(dataset.state_dim()).with_width(DESK_WIDTH);
    let protocol = StabilityProtocol { steps: 2000, count: 500, eps: default_eps(&dataset) };

    let mut stable = preset.desk_config(7);
    stable.iterations = iterations;
    let cloning = stable.clone().behavioral_cloning();
    for (label, config) in [("stable", stable), ("cloning", cloning)] {
        let outcome = train(&dataset, &network, &config, |_| {})?;
        let mut d = final_goal_distances(&outcome.params, &dataset, &protocol, 0)?;
        d.sort_by(f64::total_cmp);
        let missed = d.iter().filter(|v| **v > protocol.eps).count();
        println!(
            "{label:>8}: {missed}/{} rollouts miss the goal; final distance median {:.4}, max {:.4}",
            d.len(),
            d[d.len() / 2],
            d[d.len() - 1]
        );
    }
    Ok(())
}
