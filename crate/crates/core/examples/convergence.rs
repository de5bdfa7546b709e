//! Convergence diagnostics and empirical spatial dependence.
//!
//! ```bash
//! cargo run --release --example convergence
//! ```

use extattr::diagnostics::{effective_sample_size, empirical_chi, empirical_variogram, gelman_rubin, geweke_z};
use extattr::simulate::{draw_latent_field, simulate_series, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = 0.0;
    (0..n)
        .map(|_| {
            v = phi * v + rng.sample::<f64, _>(StandardNormal);
            v
        })
        .collect()
}

fn main() -> extattr::Result<()> {
    let n = 10_000;
    for phi in [0.0, 0.5, 0.9] {
        let chains: Vec<Vec<f64>> = (0..4).map(|s| ar1(n, phi, s)).collect();
        println!(
            "AR(1) phi = {phi}: Geweke z = {:+.2}, R-hat = {:.4}, ESS = {:.0} (theory {:.0})",
            geweke_z(&chains[0], 0.1, 0.5)?,
            gelman_rubin(&chains)?,
            effective_sample_size(&chains[0])?,
            n as f64 * (1.0 - phi) / (1.0 + phi)
        );
    }

    let config = SimConfig { nx: 5, ny: 5, seed: 9, ..SimConfig::default() };
    let (truth, _) = draw_latent_field(&config)?;
    let panel = simulate_series(&config, &truth)?;
    let graph = config.graph()?;
    let cent: Vec<(f64, f64)> = graph.cells.iter().map(|c| (c.lon, c.lat)).collect();
    let edges = [0.5, 1.5, 2.5, 3.5, 4.5, 6.0];
    let factual: Vec<Vec<f64>> = panel.iter().map(|s| s.y_f.clone()).collect();
    println!("\nchi(0.95) of factual maxima by distance:");
    for b in empirical_chi(&factual, &cent, 0.95, &edges)? {
        println!("  [{:.1}, {:.1}) {:.3} over {} pairs", b.lo, b.hi, b.value, b.n_pairs);
    }
    let delta: Vec<f64> = truth.iter().map(|c| c.beta0 - c.alpha0).collect();
    println!("variogram of the true delta field:");
    for b in empirical_variogram(&delta, &cent, &edges)? {
        println!("  [{:.1}, {:.1}) {:.4}", b.lo, b.hi, b.value);
    }
    Ok(())
}
