//! Generate a synthetic factual/counterfactual panel with known truth.
//!
//! ```bash
//! cargo run --example simulate_panel -- /tmp/synthetic
//! ```

use std::path::PathBuf;

use extattr::simulate::{generate_panel, SimConfig, TruthManifest};

fn main() -> extattr::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("extattr-sim"));
    let config = SimConfig { nx: 4, ny: 3, start_year: 1900, end_year: 2014, seed: 11, ..SimConfig::default() };
    let files = generate_panel(&config, &dir)?;
    println!("panel      {}", files.panel.display());
    println!("covariates {}", files.covariates.display());
    println!("truth      {}", files.truth.display());

    let truth = TruthManifest::read(&files.truth)?;
    println!("\ntrue delta = beta0 - alpha0 per cell:");
    for (c, d) in truth.cells.iter().zip(truth.delta()) {
        println!("  {} ({:7.2}, {:5.2})  {d:+.3}", c.cell_id, c.lon, c.lat);
    }
    Ok(())
}
