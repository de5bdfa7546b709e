//! Outer credible regions for {g : delta(g) >= u} with family-wise error
//! control, on a hand-made posterior ensemble.
//!
//! ```bash
//! cargo run --example hotspot_regions
//! ```

use extattr::causal::DrawField;
use extattr::hotspot::estimate_region;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> extattr::Result<()> {
    let (nx, ny, draws) = (8, 5, 4000);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // effect rising west to east, with a shared draw-level shift
    let centre: Vec<f64> = (0..nx * ny).map(|g| 0.1 + 0.12 * (g % nx) as f64).collect();
    let mut values = Vec::with_capacity(draws * centre.len());
    for _ in 0..draws {
        let shared: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
        for c in &centre {
            values.push(c + shared + 0.08 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let ids = (0..nx * ny).map(|g| format!("x{}y{}", g % nx, g / nx)).collect();
    let field = DrawField::new(ids, values)?;

    for u in [0.35, 0.65] {
        let r = estimate_region(&field, u, 0.05)?;
        println!("u = {u}: c_hat = {:+.3}, {:.0}% of cells", r.c_hat, 100.0 * r.coverage);
        for y in (0..ny).rev() {
            let row: String = (0..nx).map(|x| if r.in_region[y * nx + x] { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }
    Ok(())
}
