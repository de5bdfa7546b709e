//! The whole workflow driven from a run configuration, as the `extattr
//! pipeline` command does it, followed by a plot-ready export.
//!
//! ```bash
//! cargo run --release --example pipeline -- /tmp/extattr-run
//! ```

use std::path::PathBuf;

use extattr::cli::{export_maps, run_pipeline, RunConfig};
use extattr::simulate::SimConfig;
use extattr::smooth::Schedule;

fn main() -> extattr::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("extattr-run"));
    let cfg = RunConfig {
        output_dir: out.clone(),
        simulate: Some(SimConfig { nx: 4, ny: 4, start_year: 1900, end_year: 2014, ..SimConfig::default() }),
        schedule: Schedule::new(2400, 400, 4)?,
        chains: 2,
        ..RunConfig::default()
    };
    std::fs::create_dir_all(&out).map_err(|e| extattr::Error::io(&out, e))?;
    cfg.save(&out.join("run.json"))?;

    let first = run_pipeline(&cfg, false)?;
    println!("ran {:?}", first.ran);
    let second = run_pipeline(&cfg, false)?;
    println!("second pass skipped {:?}", second.skipped);

    let l = cfg.layout();
    let meta = export_maps(
        &[l.causal().join("delta_1900-2014.csv"), l.causal().join("trend_difference.csv")],
        &[l.hotspot().join("hotspot_u0.35.csv"), l.hotspot().join("hotspot_u0.65.csv")],
        &[],
        &l.maps(),
    )?;
    for f in meta.fields {
        println!("{:<22} {:>8} rows {}", f.name, f.kind, f.n_rows);
    }
    Ok(())
}
