//! Per-cell maximum likelihood with Laplace approximation (the Max step).
//!
//! ```bash
//! cargo run --release --example fit_cells
//! ```

use extattr::extremes::PARAM_NAMES;
use extattr::maxstep::{run_max, MaxOptions};
use extattr::simulate::{draw_latent_field, simulate_series, SimConfig};

fn main() -> extattr::Result<()> {
    let config = SimConfig { nx: 3, ny: 2, start_year: 1900, end_year: 2014, seed: 5, ..SimConfig::default() };
    let (truth, _) = draw_latent_field(&config)?;
    let panel = simulate_series(&config, &truth)?;

    let res = run_max(&panel, &MaxOptions::default(), 4)?;
    println!("{} cells, {} flagged", res.n_cells(), res.n_flagged());
    for i in 0..res.n_cells() {
        let est = res.cell(i).to_array();
        let tru = truth[i].to_array();
        let se: Vec<f64> = (0..7).map(|k| res.covariance[i][(k, k)].sqrt()).collect();
        println!("\n{} ({:?}, loglik {:.2})", res.cell_ids[i], res.status[i], res.loglik[i]);
        for k in 0..7 {
            println!("  {:<11} {:9.4} ± {:.4}   truth {:9.4}", PARAM_NAMES[k], est[k], se[k], tru[k]);
        }
    }
    Ok(())
}
