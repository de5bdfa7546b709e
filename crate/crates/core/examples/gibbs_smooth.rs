//! Gibbs sampling of the latent Gaussian model (the Smooth step) on top of
//! Max-step estimates.
//!
//! ```bash
//! cargo run --release --example gibbs_smooth
//! ```

use extattr::lattice::{CovariateTable, DesignMatrix};
use extattr::maxstep::{self, run_max, MaxOptions};
use extattr::simulate::{generate_panel, SimConfig};
use extattr::smooth::{run_gibbs, GibbsModel, GibbsOptions, Hyperpriors, Schedule};

fn main() -> extattr::Result<()> {
    let dir = std::env::temp_dir().join("extattr-gibbs-example");
    let config = SimConfig { nx: 3, ny: 3, start_year: 1950, end_year: 2014, seed: 3, ..SimConfig::default() };
    let files = generate_panel(&config, &dir)?;

    let graph = config.graph()?;
    let cov = CovariateTable::read_csv(&files.covariates)?.aligned_to(&graph)?.standardized();
    let panel = maxstep::align_panel(maxstep::read_panel_csv(&files.panel, None)?, &graph)?;
    let max = run_max(&panel, &MaxOptions::default(), 4)?;

    let design = DesignMatrix::build(&graph, &cov)?;
    let model = GibbsModel::new(&max, &design, &graph, Hyperpriors::default())?;
    let opts = GibbsOptions { schedule: Schedule::new(3000, 1000, 4)?, n_chains: 2, seed: 1, threads: 2, postmortem_dir: None };
    let chains = run_gibbs(&model, &opts)?;

    for ch in &chains {
        let g = ch.gamma_series(0);
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        println!("chain {}: {} draws, posterior mean of the alpha0 intercept {mean:.3}", ch.chain, ch.n_draws());
    }
    let path = chains[0].write(&dir, "chain0", 2)?;
    println!("draws written to {}", path.display());
    Ok(())
}
