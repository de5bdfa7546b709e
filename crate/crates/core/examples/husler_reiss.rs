//! The bivariate Husler-Reiss law that couples the counterfactual and
//! factual maxima of one grid cell.
//!
//! ```bash
//! cargo run --example husler_reiss
//! ```

use extattr::extremes::{bhr_cdf, bhr_chi, bhr_logpdf, CellParams};

fn main() -> extattr::Result<()> {
    println!("tail dependence chi(lambda) = 2 - 2 Phi(1 / lambda)");
    for lambda in [0.1, 0.5, 1.0, 2.0, 10.0] {
        println!("  lambda = {lambda:>5}: chi = {:.4}", bhr_chi(lambda)?);
    }

    let mut c = CellParams {
        alpha0: 30.0,
        alpha1: 0.1,
        beta0: 30.8,
        beta1: 0.5,
        sigma_star: 0.4,
        psi: -0.15,
        lambda_star: 0.0,
    };
    let t = 0.5;
    let (cf, f) = (c.counterfactual(t), c.factual(t));
    println!("\nat t* = {t}: counterfactual mu = {:.2}, factual mu = {:.2}, sigma = {:.3}, xi = {:.3}", cf.mu, f.mu, c.sigma(), c.xi());
    for ls in [-3.0, 0.0, 2.0] {
        c.lambda_star = ls;
        let joint = bhr_cdf(32.0, 33.0, &c, t)?;
        let dens = bhr_logpdf(32.0, 33.0, &c, t)?.exp();
        println!("  lambda = {:6.3}: F(32, 33) = {joint:.4}, density = {dens:.5}", c.lambda());
    }
    Ok(())
}
