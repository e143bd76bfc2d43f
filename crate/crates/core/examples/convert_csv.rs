//! Turns plain `demo,t,x_1..x_n` rows into a dataset document and shows the
//! normalization that training will apply.
//!
//! `cargo run --release --example convert_csv -- [input.csv] [output.json]`

use puma::data::{convert_csv, prepare_dataset};
use puma::network::Order;

const EXAMPLE: &str = "demo,t,x,y
0,0.0,-40,10
0,0.1,-20,6
0,0.2,-5,2
0,0.3,0,0
1,0.0,-38,-12
1,0.1,-18,-5
1,0.2,-4,-1
1,0.3,0,0
";

fn main() -> puma::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let text = match args.first() {
        Some(p) => std::fs::read_to_string(p).map_err(|e| puma::Error::io(p, e))?,
        None => EXAMPLE.to_string(),
    };
    let file = convert_csv(&text, None, Order::First)?;
    let dataset = prepare_dataset(file.clone())?;
    println!("{} demos, dt {}, raw space {:?}", file.demos.len(), file.dt, file.manifold);
    println!("normalized goal {:?}", dataset.goal);
    println!("offset {:?} gain {:?}", dataset.scaling.offset, dataset.scaling.gain);
    if let Some(out) = args.get(1) {
        file.save(std::path::Path::new(out))?;
        println!("wrote {out}");
    }
    Ok(())
}
