//! Trains the stable policy on one of the synthetic shapes and prints the
//! evaluation report.
//!
//! `cargo run --release --example train_shape_puma -- [sine|spiral|sphere-s|figure-eight] [iterations] [checkpoint.json]`

use std::time::Instant;

use puma::data::prepare_dataset;
use puma::evaluation::{default_eps, evaluate, StabilityProtocol};
use puma::shapes::Shape;
use puma::training::{train, Preset, DESK_ITERATIONS, DESK_WIDTH};

fn main() -> puma::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let shape = args.first().and_then(|s| Shape::parse(s)).unwrap_or(Shape::Sine);
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(DESK_ITERATIONS);

    let dataset = prepare_dataset(shape.dataset())?;
    let preset = Preset::for_space(dataset.order, &dataset.spec);
    let mut config = preset.desk_config(7);
    config.iterations = iterations;
    let network = preset.network_config(dataset.state_dim()).with_width(DESK_WIDTH);

    let start = Instant::now();
    let every = (iterations / 10).max(1);
    let outcome = train(&dataset, &network, &config, |row| {
        if row.iteration % every == 0 {
            println!(
                "{:>6}  imitation {:.3e}  stability {:.3e}  boundary {:.3e}",
                row.iteration, row.loss.imitation, row.loss.stability, row.loss.boundary
            );
        }
    })?;
    println!("{} on {} trained in {:.0}s", preset.name(), shape.name(), start.elapsed().as_secs_f64());

    let protocol = StabilityProtocol { steps: 2000, count: 500, eps: default_eps(&dataset) };
    let report = evaluate(&outcome.params, &dataset, &protocol, 0)?;
    println!(
        "rmse {:.4}  dtw {:.3}  frechet {:.4}  unsuccessful {:.1}%",
        report.rmse.mean, report.dtwd.mean, report.frechet.mean, report.unsuccessful_pct
    );
    if let Some(path) = args.get(2) {
        outcome.checkpoint.save(std::path::Path::new(path))?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
