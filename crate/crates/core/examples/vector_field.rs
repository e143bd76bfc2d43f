//! Exports a trained planar field as CSV and SVG with demos and rollouts
//! overlaid.
//!
//! `cargo run --release --example vector_field -- [out-prefix] [iterations]`

use std::path::PathBuf;

use puma::data::prepare_dataset;
use puma::evaluation::{demo_rollouts, export_vector_field, field_svg};
use puma::shapes::Shape;
use puma::training::{train, Preset, DESK_WIDTH};

fn main() -> puma::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let prefix = PathBuf::from(args.first().map_or("sine_field", String::as_str));
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);

    let dataset = prepare_dataset(Shape::Sine.dataset())?;
    let mut config = Preset::Euclidean.desk_config(7);
    config.iterations = iterations;
    let outcome = train(&dataset, &Preset::Euclidean.network_config(2).with_width(DESK_WIDTH), &config, |_| {})?;

    let table = export_vector_field(&outcome.params, &dataset.spec, 25)?;
    let csv = prefix.with_extension("csv");
    table
        .write_csv(std::fs::File::create(&csv).map_err(|e| puma::Error::io(&csv, e))?)
        .map_err(|e| puma::Error::io(&csv, e))?;
    let mut paths: Vec<Vec<Vec<f64>>> = dataset.demos.iter().map(|d| d.states.clone()).collect();
    paths.extend(demo_rollouts(&outcome.params, &dataset)?);
    let svg = prefix.with_extension("svg");
    std::fs::write(&svg, field_svg(&table, &paths, &dataset.goal)).map_err(|e| puma::Error::io(&svg, e))?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
