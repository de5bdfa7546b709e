//! Posterior maps of the return-level treatment effect and of the trends.
//!
//! ```bash
//! cargo run --release --example causal_effects
//! ```

use extattr::causal::{delta_field, trend_summary, CausalSummary, Period, World};
use extattr::lattice::DesignMatrix;
use extattr::maxstep::{run_max, MaxOptions};
use extattr::simulate::{draw_latent_field, simulate_series, SimConfig};
use extattr::smooth::{run_gibbs, GibbsModel, GibbsOptions, Hyperpriors, Schedule};

fn main() -> extattr::Result<()> {
    let config = SimConfig { nx: 3, ny: 3, start_year: 1850, end_year: 2014, seed: 21, ..SimConfig::default() };
    let (truth, manifest) = draw_latent_field(&config)?;
    let panel = simulate_series(&config, &truth)?;
    let graph = config.graph()?;
    let cov = config.covariates().aligned_to(&graph)?.standardized();
    let max = run_max(&panel, &MaxOptions::default(), 4)?;
    let design = DesignMatrix::build(&graph, &cov)?;
    let model = GibbsModel::new(&max, &design, &graph, Hyperpriors::default())?;
    let opts = GibbsOptions { schedule: Schedule::new(4000, 1000, 3)?, n_chains: 2, seed: 8, threads: 2, postmortem_dir: None };
    let chains = run_gibbs(&model, &opts)?;
    let time = panel[0].time.clone();

    for p in [Period::new(1850, 2014)?, Period::new(1850, 1900)?, Period::new(1985, 2014)?] {
        let s = CausalSummary::from_field(&delta_field(&chains, p, &time)?, &graph, "delta", Some(p))?;
        println!("delta over {}:", p.label());
        for r in &s.rows {
            println!("  {}  {:+.3} [{:+.3}, {:+.3}]", r.cell_id, r.mean, r.q05, r.q95);
        }
    }
    println!("\ntrue full-period delta: {:?}", manifest.delta().iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let trend = trend_summary(&chains, World::Difference, &time, &graph)?;
    println!("\nfactual minus counterfactual trend per decade:");
    for r in &trend.rows {
        println!("  {}  {:+.4}", r.cell_id, 10.0 * r.mean);
    }
    Ok(())
}
