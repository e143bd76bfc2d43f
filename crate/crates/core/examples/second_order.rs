//! Second-order policy on a self-intersecting figure-eight. The state stacks
//! position and velocity; the network outputs acceleration.
//!
//! `cargo run --release --example second_order -- [iterations] [checkpoint.json]`

use puma::data::prepare_dataset;
use puma::evaluation::{default_eps, evaluate, StabilityProtocol};
use puma::shapes::Shape;
use puma::training::{train, Preset};

fn main() -> puma::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations = args.first().and_then(|s| s.parse().ok()).unwrap_or(30_000);
    let dataset = prepare_dataset(Shape::FigureEight.dataset())?;
    println!("state dim {} (position {})", dataset.state_dim(), dataset.position_dim);

    let preset = Preset::EuclideanSecondOrder;
    let mut config = preset.desk_config(7);
    config.iterations = iterations;
    // Twice the first-order desk size; smaller nets often settle on slow
    // spurious modes away from the goal.
    config.loss.batch_imitation = 128;
    config.loss.batch_stability = 128;
    let network = preset.network_config(dataset.state_dim()).with_width(64);
    let outcome = train(&dataset, &network, &config, |row| {
        if row.iteration % 5000 == 0 {
            println!("{:>6}  imitation {:.3e}", row.iteration, row.loss.imitation);
        }
    })?;

    let protocol = StabilityProtocol { steps: 2000, count: 500, eps: default_eps(&dataset) };
    let report = evaluate(&outcome.params, &dataset, &protocol, 0)?;
    println!("rmse {:.4}  unsuccessful {:.1}% (position distance)", report.rmse.mean, report.unsuccessful_pct);
    if let Some(path) = args.get(1) {
        outcome.checkpoint.save(std::path::Path::new(path))?;
    }
    Ok(())
}
