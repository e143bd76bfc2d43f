//! Accuracy metrics between two polylines.

use puma::evaluation::{dtw_distance, frechet_distance, rmse};

fn main() -> puma::Result<()> {
    let demo: Vec<Vec<f64>> = (0..=20).map(|k| vec![k as f64 / 20.0, 0.0]).collect();
    // Same path, slower start. RMSE compares by index, so it sees the lag;
    // the discrete Frechet distance mostly sees the geometry. DTW is a sum over the coupling.
    let lagged: Vec<Vec<f64>> = (0..=20)
        .map(|k| {
            let s = k as f64 / 20.0;
            vec![s * s, 0.0]
        })
        .collect();
    println!("rmse    {:.4}", rmse(&lagged, &demo)?);
    println!("dtw     {:.4}", dtw_distance(&lagged, &demo)?);
    println!("frechet {:.4}", frechet_distance(&lagged, &demo)?);
    Ok(())
}
