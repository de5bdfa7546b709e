//! Outer credible regions for the exceedance set `{g : δ(g) ≥ u}` with
//! family-wise error control.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::DrawField;
use crate::error::{Error, Result};

/// `T = (E[δ] − u) / √E[(δ − u)²]` over the draws. The flag is set when
/// every draw equals `u`, in which case `T` is reported as 0.
pub fn test_statistic(draws: &[f64], u: f64) -> Result<(f64, bool)> {
    if draws.len() < 2 {
        return Err(Error::Domain("test statistic needs at least two draws".into()));
    }
    let n = draws.len() as f64;
    let num = draws.iter().sum::<f64>() / n - u;
    let den = (draws.iter().map(|d| (d - u).powi(2)).sum::<f64>() / n).sqrt();
    if den == 0.0 {
        return Ok((0.0, true));
    }
    Ok((num / den, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotResult {
    pub u: f64,
    pub alpha: f64,
    pub cell_ids: Vec<String>,
    pub t: Vec<f64>,
    /// Cells whose statistic was undefined.
    pub degenerate: Vec<bool>,
    pub c_hat: f64,
    pub in_region: Vec<bool>,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HotspotSummary {
    pub u: f64,
    pub alpha: f64,
    pub c_hat: f64,
    pub coverage: f64,
    pub n_cells: usize,
    pub n_in_region: usize,
    pub n_degenerate: usize,
}

impl HotspotResult {
    pub fn region(&self) -> Vec<usize> {
        (0..self.in_region.len()).filter(|&g| self.in_region[g]).collect()
    }

    pub fn summary(&self) -> HotspotSummary {
        HotspotSummary {
            u: self.u,
            alpha: self.alpha,
            c_hat: self.c_hat,
            coverage: self.coverage,
            n_cells: self.cell_ids.len(),
            n_in_region: self.in_region.iter().filter(|&&b| b).count(),
            n_degenerate: self.degenerate.iter().filter(|&&b| b).count(),
        }
    }

    /// `{stem}.csv` with `cell_id,T,in_region` and `{stem}.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let p = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
        w.write_record(["cell_id", "T", "in_region"]).map_err(|e| Error::csv(&p, e))?;
        for g in 0..self.cell_ids.len() {
            w.write_record([self.cell_ids[g].clone(), format!("{:e}", self.t[g]), self.in_region[g].to_string()])
                .map_err(|e| Error::csv(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{stem}.json"));
        let s = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::json(&p, e))?;
        std::fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))
    }
}

/// Read `cell_id,T,in_region` rows.
pub fn read_region_csv(path: &Path) -> Result<Vec<(String, f64, bool)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    for (i, name) in ["cell_id", "T", "in_region"].iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::Ingestion(format!(
                "{}: column {} should be `{name}`, found `{}`",
                path.display(),
                i + 1,
                headers.get(i).unwrap_or("")
            )));
        }
    }
    rdr.deserialize().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

/// Lower empirical quantile: the `⌈αB⌉`-th order statistic.
pub fn lower_quantile(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((alpha * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// The outer region `{g : T(g) ≥ ĉ(α)}`, where `ĉ(α)` is the lower
/// α-quantile over draws of `M = min{T(g) : δ(g) ≥ u}` (0 when no cell
/// exceeds `u`).
pub fn estimate_region(field: &DrawField, u: f64, alpha: f64) -> Result<HotspotResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !u.is_finite() {
        return Err(Error::Domain("threshold must be finite".into()));
    }
    let n = field.n_cells();
    let stats: Vec<(f64, bool)> =
        (0..n).into_par_iter().map(|g| test_statistic(&field.cell(g), u)).collect::<Result<_>>()?;
    let t: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let m: Vec<f64> = (0..field.n_draws)
        .into_par_iter()
        .map(|b| {
            let d = field.draw(b);
            let mut min = f64::INFINITY;
            for g in 0..n {
                if d[g] >= u && t[g] < min {
                    min = t[g];
                }
            }
            if min.is_finite() {
                min
            } else {
                0.0
            }
        })
        .collect();
    let c_hat = lower_quantile(&m, alpha);
    let in_region: Vec<bool> = t.iter().map(|&v| v >= c_hat).collect();
    let coverage = in_region.iter().filter(|&&b| b).count() as f64 / n as f64;
    Ok(HotspotResult {
        u,
        alpha,
        cell_ids: field.cell_ids.clone(),
        t,
        degenerate: stats.iter().map(|s| s.1).collect(),
        c_hat,
        in_region,
        coverage,
    })
}
