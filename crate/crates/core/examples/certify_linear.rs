//! Empirical certificate for the scalar systems `dy/dt = -y` and `dy/dt = +y`,
//! compared with the closed-form bound. Pass a checkpoint to certify a
//! trained policy instead.
//!
//! `cargo run --release --example certify_linear -- [checkpoint.json]`

use puma::certify::{auto_d0_grid, certify, fixtures, latent_distances, CertificationConfig};
use puma::geometry::sample_uniform;
use puma::network::Checkpoint;
use rand::SeedableRng;

fn main() -> puma::Result<()> {
    if let Some(path) = std::env::args().nth(1) {
        let ck = Checkpoint::load(std::path::Path::new(&path))?;
        let policy = ck.policy()?;
        let mut config = CertificationConfig { dt: ck.dt, metric: ck.metric, ..fixtures::config() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let candidates = sample_uniform(&ck.manifold, &mut rng, config.candidates);
        config.d0_grid = auto_d0_grid(&latent_distances(&policy, config.metric, &ck.goal, &candidates)?, 8);
        let report = certify(&policy, &ck.manifold, &ck.goal, &config)?;
        for c in &report.checks {
            println!("{:<26} {}", c.name, if c.passed { "pass" } else { "fail" });
        }
        return Ok(());
    }

    let config = fixtures::config();
    for rate in [-1.0, 1.0] {
        let report = fixtures::report(rate)?;
        println!("dy/dt = {rate:+} y: certified {}", report.passed);
        for c in &report.checks {
            println!("  {:<26} {:<5} margin {:+.3e}", c.name, if c.passed { "pass" } else { "fail" }, c.margin);
        }
        if rate < 0.0 {
            let k = report.times.len() / 2;
            for (s, d0) in config.d0_grid.iter().enumerate() {
                let exact = fixtures::beta_closed_form(*d0, report.times[k], config.alpha, config.dt);
                println!(
                    "  d0 {d0:.2}  t {:.2}  beta {:.5}  closed form {exact:.5}",
                    report.times[k], report.beta_surface[s][k]
                );
            }
        }
    }
    Ok(())
}
