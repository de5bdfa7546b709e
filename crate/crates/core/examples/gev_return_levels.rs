//! GEV margins, return levels and the bounded shape transform.
//!
//! ```bash
//! cargo run --example gev_return_levels
//! ```

use extattr::extremes::{gev_cdf, psi_to_shape, return_level, shape_to_psi, GevParams, ShapeTransformConstants};

fn main() -> extattr::Result<()> {
    let k = ShapeTransformConstants::default();
    println!("shape transform: c = {}, b = {:.5}, a = {:.5}", k.c_psi, k.b_psi, k.a_psi);

    for xi in [-0.4, -0.25, -0.1, 0.0, 0.1, 0.3] {
        let psi = shape_to_psi(xi)?;
        println!("  xi = {xi:+.2}  ->  psi = {psi:+.5}  ->  xi = {:+.5}", psi_to_shape(psi));
    }

    // a summer-maximum style margin with a bounded upper tail
    let g = GevParams::new(34.0, 1.6, -0.2)?;
    println!("\nGEV(mu = 34, sigma = 1.6, xi = -0.2), upper endpoint {:?}", g.support_endpoint());
    for years in [2.0, 10.0, 50.0, 100.0, 1000.0] {
        let z = return_level(1.0 / years, &g)?;
        println!("  {years:>6}-year level {z:7.3}  (F = {:.5})", gev_cdf(z, &g)?);
    }
    Ok(())
}
