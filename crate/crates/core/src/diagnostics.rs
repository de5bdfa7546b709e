//! MCMC convergence diagnostics and exploratory dependence statistics.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::smooth::PosteriorDraws;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Autocovariance at lags `0..=max_lag` (divisor `n`).
fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..=max_lag.min(n - 1))
        .map(|k| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Spectral density at frequency zero with a Bartlett window spanning 4%
/// of the series.
pub fn spectral_density_zero(x: &[f64]) -> f64 {
    let lag = ((0.04 * x.len() as f64).ceil() as usize).max(1);
    let g = autocovariance(x, lag);
    let l = (g.len() - 1) as f64;
    g[0] + 2.0 * g.iter().enumerate().skip(1).map(|(k, v)| (1.0 - k as f64 / (l + 1.0)) * v).sum::<f64>()
}

fn check_chain(x: &[f64], what: &str) -> Result<()> {
    if x.len() < 100 {
        return Err(Error::Domain(format!("{what} needs a chain of at least 100 draws, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what}: chain has non-finite values")));
    }
    Ok(())
}

fn zero_variance(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Geweke's z-score comparing the first `frac_a` and last `frac_b` of a chain.
/// A constant chain yields a `Numerical` error.
pub fn geweke_z(chain: &[f64], frac_a: f64, frac_b: f64) -> Result<f64> {
    check_chain(chain, "Geweke diagnostic")?;
    if !(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0) {
        return Err(Error::Domain(format!("invalid Geweke windows {frac_a}, {frac_b}")));
    }
    let n = chain.len();
    let na = ((frac_a * n as f64).floor() as usize).max(2);
    let nb = ((frac_b * n as f64).floor() as usize).max(2);
    let a = &chain[..na];
    let b = &chain[n - nb..];
    let va = spectral_density_zero(a) / na as f64;
    let vb = spectral_density_zero(b) / nb as f64;
    if zero_variance(chain) || !(va + vb > 0.0) {
        return Err(Error::Numerical("Geweke diagnostic undefined for a constant chain".into()));
    }
    Ok((mean(a) - mean(b)) / (va + vb).sqrt())
}

/// Potential scale reduction `R̂ = √(V̂ / Ŵ)` with `V̂ = Ŵ + B/n` and `Ŵ` the
/// mean within-chain variance (divisor `n`), so identical chains give 1.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Domain("Gelman-Rubin needs at least two chains".into()));
    }
    let n = chains[0].len();
    for c in chains {
        check_chain(c, "Gelman-Rubin")?;
        if c.len() != n {
            return Err(Error::Domain("chains must have equal lengths".into()));
        }
    }
    let m = chains.len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b_over_n = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64)
        .sum::<f64>()
        / m;
    if !(w > 0.0) {
        return Err(Error::Numerical("Gelman-Rubin undefined for constant chains".into()));
    }
    Ok(((w + b_over_n) / w).sqrt())
}

/// ESS = N / τ with τ from Geyer's initial positive, monotone sequence of
/// paired autocorrelations. τ is floored at `1/log10(N)` so antithetic
/// chains stay finite.
pub fn effective_sample_size(chain: &[f64]) -> Result<f64> {
    check_chain(chain, "effective sample size")?;
    if zero_variance(chain) {
        return Err(Error::Numerical("effective sample size undefined for a constant chain".into()));
    }
    let n = chain.len();
    let m = mean(chain);
    let d: Vec<f64> = chain.iter().map(|v| v - m).collect();
    let acov = |k: usize| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let g0 = acov(0);
    let rho = |k: usize| if k == 0 { 1.0 } else { acov(k) / g0 };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let mut pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev {
            pair = prev;
        }
        prev = pair;
        tau += 2.0 * pair;
        k += 2;
    }
    let tau = tau.max(1.0 / (n as f64).log10());
    Ok(n as f64 / tau)
}

/// Per-parameter diagnostics across chains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDiagnostics {
    pub parameter: String,
    /// Geweke z per chain (`NaN` when undefined).
    pub geweke_z: Vec<f64>,
    pub rhat: f64,
    /// Summed over chains.
    pub ess: f64,
    pub flagged: bool,
}

/// Diagnostics for every stored column (η, γ and Σ).
pub fn diagnose(chains: &[PosteriorDraws]) -> Result<Vec<ChainDiagnostics>> {
    let first = chains.first().ok_or_else(|| Error::Domain("no chains to diagnose".into()))?;
    if chains.iter().any(|c| c.n_columns() != first.n_columns() || c.n_draws() != first.n_draws()) {
        return Err(Error::Domain("chains have different shapes".into()));
    }
    if first.n_draws() < 100 {
        return Err(Error::Domain(format!("diagnostics need at least 100 retained draws, got {}", first.n_draws())));
    }
    let names = first.column_names();
    Ok((0..first.n_columns())
        .into_par_iter()
        .map(|c| {
            let cols: Vec<Vec<f64>> = chains.iter().map(|ch| ch.column(c)).collect();
            let z: Vec<f64> = cols.iter().map(|x| geweke_z(x, 0.1, 0.5).unwrap_or(f64::NAN)).collect();
            let rhat = if cols.len() > 1 { gelman_rubin(&cols).unwrap_or(f64::NAN) } else { f64::NAN };
            let ess: f64 = cols.iter().map(|x| effective_sample_size(x).unwrap_or(f64::NAN)).sum();
            let flagged = z.iter().any(|v| !v.is_finite()) || ess.is_nan() || (cols.len() > 1 && rhat.is_nan());
            ChainDiagnostics { parameter: names[c].clone(), geweke_z: z, rhat, ess, flagged }
        })
        .collect())
}

/// Writes `geweke.csv`, `rhat.csv` and `ess.csv`.
pub fn write_diagnostics(dir: &Path, diags: &[ChainDiagnostics]) -> Result<()> {
    let open = |name: &str| {
        let p = dir.join(name);
        csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e)).map(|w| (w, p))
    };
    let (mut g, gp) = open("geweke.csv")?;
    g.write_record(["parameter", "chain", "z", "abs_below_1.96"]).map_err(|e| Error::csv(&gp, e))?;
    let (mut r, rp) = open("rhat.csv")?;
    r.write_record(["parameter", "rhat", "above_1.1"]).map_err(|e| Error::csv(&rp, e))?;
    let (mut e, ep) = open("ess.csv")?;
    e.write_record(["parameter", "ess"]).map_err(|x| Error::csv(&ep, x))?;
    for d in diags {
        for (c, z) in d.geweke_z.iter().enumerate() {
            g.write_record([d.parameter.clone(), c.to_string(), z.to_string(), (z.abs() < 1.96).to_string()])
                .map_err(|x| Error::csv(&gp, x))?;
        }
        r.write_record([d.parameter.clone(), d.rhat.to_string(), (d.rhat > 1.1).to_string()])
            .map_err(|x| Error::csv(&rp, x))?;
        e.write_record([d.parameter.clone(), d.ess.to_string()]).map_err(|x| Error::csv(&ep, x))?;
    }
    for (w, p) in [(g, gp), (r, rp), (e, ep)] {
        let mut w = w;
        w.flush().map_err(|x| Error::io(&p, x))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spatial dependence
// ---------------------------------------------------------------------------

/// Binned statistic: bins are `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean separation of the pairs in the bin.
    pub distance: f64,
    pub value: f64,
    pub n_pairs: usize,
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn bin_pairs(
    centroids: &[(f64, f64)],
    edges: &[f64],
    include_self: bool,
    stat: impl Fn(usize, usize) -> f64 + Sync,
) -> Result<Vec<DistanceBin>> {
    if centroids.len() < 2 && !include_self {
        return Err(Error::Domain("need at least two cells".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("distance bin edges must be increasing".into()));
    }
    let n = centroids.len();
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| ((if include_self { i } else { i + 1 })..n).map(move |j| (i, j))).collect();
    let vals: Vec<(f64, f64)> = pairs.par_iter().map(|&(i, j)| (euclid(centroids[i], centroids[j]), stat(i, j))).collect();
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let inside: Vec<&(f64, f64)> = vals.iter().filter(|(d, _)| *d >= w[0] && *d < w[1]).collect();
        if inside.is_empty() {
            continue;
        }
        let k = inside.len() as f64;
        out.push(DistanceBin {
            lo: w[0],
            hi: w[1],
            distance: inside.iter().map(|p| p.0).sum::<f64>() / k,
            value: inside.iter().map(|p| p.1).sum::<f64>() / k,
            n_pairs: inside.len(),
        });
    }
    Ok(out)
}

/// Indicator of exceeding the empirical `u`-quantile, by rank.
fn exceedances(x: &[f64], u: f64) -> Vec<bool> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let cut = (u * n as f64).floor() as usize;
    let mut out = vec![false; n];
    for &i in &idx[cut..] {
        out[i] = true;
    }
    out
}

/// `χ̂(u) = P̂(both exceed) / P̂(first exceeds)` for one pair of series.
pub fn chi_pair(x: &[f64], y: &[f64], u: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Domain("series must share a non-empty observation period".into()));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("threshold probability must lie in (0, 1), got {u}")));
    }
    let (ex, ey) = (exceedances(x, u), exceedances(y, u));
    let one = ex.iter().filter(|&&b| b).count();
    let both = ex.iter().zip(&ey).filter(|(a, b)| **a && **b).count();
    Ok(both as f64 / one as f64)
}

/// Pairwise χ̂(u) of per-cell series averaged within distance bins.
/// Self-pairs are not included.
pub fn empirical_chi(series: &[Vec<f64>], centroids: &[(f64, f64)], u: f64, edges: &[f64]) -> Result<Vec<DistanceBin>> {
    if series.len() != centroids.len() {
        return Err(Error::Domain("one centroid per series required".into()));
    }
    let t = series.first().map_or(0, Vec::len);
    if series.iter().any(|s| s.len() != t) {
        return Err(Error::Domain("series must share one observation period".into()));
    }
    chi_pair(&series[0], &series[0], u)?;
    let ex: Vec<Vec<bool>> = series.iter().map(|s| exceedances(s, u)).collect();
    bin_pairs(centroids, edges, false, |i, j| {
        let one = ex[i].iter().filter(|&&b| b).count();
        let both = ex[i].iter().zip(&ex[j]).filter(|(a, b)| **a && **b).count();
        both as f64 / one as f64
    })
}

/// Classical semivariogram `γ̂(h) = mean of ½(vᵢ − vⱼ)²` per distance bin.
pub fn empirical_variogram(values: &[f64], centroids: &[(f64, f64)], edges: &[f64]) -> Result<Vec<DistanceBin>> {
    if values.len() != centroids.len() {
        return Err(Error::Domain("one centroid per value required".into()));
    }
    bin_pairs(centroids, edges, false, |i, j| 0.5 * (values[i] - values[j]).powi(2))
}

pub fn write_bins_csv(path: &Path, bins: &[DistanceBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for b in bins {
        w.serialize(b).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
