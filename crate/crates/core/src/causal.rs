//! The return-level treatment effect δ(g) and trend functionals, computed per
//! posterior draw and then summarized.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremes::{self, CellParams, TimeIndex, N_PARAMS};
use crate::lattice::GridGraph;
use crate::smooth::PosteriorDraws;

/// Inclusive year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: i32,
    pub end: i32,
}

impl Period {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if end < start {
            return Err(Error::Domain(format!("empty period {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.start..=self.end
    }
}

/// Mean of standardized time over `period`, using the full-period
/// standardization of `time`.
pub fn mean_t_star(time: &TimeIndex, period: Period) -> Result<f64> {
    let first = *time.years.first().ok_or_else(|| Error::Domain("empty time index".into()))?;
    let last = *time.years.last().expect("non-empty");
    if period.start < first || period.end > last {
        return Err(Error::Domain(format!(
            "period {} is outside the observed years {first}-{last}",
            period.label()
        )));
    }
    let n = (period.end - period.start + 1) as f64;
    Ok(period.years().map(|y| time.standardize(y as f64)).sum::<f64>() / n)
}

/// `δ = (β0 − α0) + t̄*·(β1 − α1)`.
pub fn prte(c: &CellParams, mean_t: f64) -> f64 {
    (c.beta0 - c.alpha0) + mean_t * (c.beta1 - c.alpha1)
}

/// δ(g) for each posterior draw of one cell.
pub fn prte_draw(draws: &[CellParams], period: Period, time: &TimeIndex) -> Result<Vec<f64>> {
    let m = mean_t_star(time, period)?;
    Ok(draws.iter().map(|c| prte(c, m)).collect())
}

/// δ computed the long way: period-averaged difference of the two worlds'
/// return levels at exceedance probability `p`.
pub fn prte_via_return_levels(c: &CellParams, period: Period, time: &TimeIndex, p: f64) -> Result<f64> {
    mean_t_star(time, period)?;
    let mut total = 0.0;
    for y in period.years() {
        let t = time.standardize(y as f64);
        total += extremes::return_level(p, &c.factual(t))? - extremes::return_level(p, &c.counterfactual(t))?;
    }
    Ok(total / (period.end - period.start + 1) as f64)
}

/// Draw-aligned values of a scalar field: entry `(b, g)` is draw `b` at cell `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawField {
    pub cell_ids: Vec<String>,
    pub n_draws: usize,
    /// Draw-major, `n_draws × n_cells`.
    pub values: Vec<f64>,
}

impl DrawField {
    pub fn new(cell_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = cell_ids.len();
        if n == 0 || values.len() % n != 0 {
            return Err(Error::Domain(format!("{} values do not fill {n} cells", values.len())));
        }
        Ok(Self { n_draws: values.len() / n, cell_ids, values })
    }

    /// From per-cell columns of equal length.
    pub fn from_columns(cell_ids: Vec<String>, cols: &[Vec<f64>]) -> Result<Self> {
        let b = cols.first().map_or(0, Vec::len);
        if cols.len() != cell_ids.len() || cols.iter().any(|c| c.len() != b) {
            return Err(Error::Domain("per-cell draw columns must have equal lengths".into()));
        }
        let values = (0..b).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
        Self::new(cell_ids, values)
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn draw(&self, b: usize) -> &[f64] {
        &self.values[b * self.n_cells()..(b + 1) * self.n_cells()]
    }

    pub fn cell(&self, g: usize) -> Vec<f64> {
        self.values.iter().skip(g).step_by(self.n_cells()).copied().collect()
    }

    /// Apply `f` to every cell's 7 latent parameters in every draw, with
    /// chains concatenated in order.
    pub fn from_draws(chains: &[PosteriorDraws], f: impl Fn(&CellParams) -> f64 + Sync) -> Result<Self> {
        let first = chains.first().ok_or_else(|| Error::Domain("no posterior draws".into()))?;
        if chains.iter().any(|c| c.cell_ids != first.cell_ids) {
            return Err(Error::Domain("chains disagree on the cell list".into()));
        }
        let n = first.n_cells();
        let mut values = Vec::with_capacity(n * chains.iter().map(|c| c.n_draws()).sum::<usize>());
        for ch in chains {
            let part: Vec<f64> = (0..ch.n_draws())
                .into_par_iter()
                .flat_map_iter(|b| {
                    let d = ch.eta_draw(b);
                    (0..n)
                        .map(|g| f(&CellParams::from_slice(&d[N_PARAMS * g..N_PARAMS * (g + 1)]).expect("7 entries")))
                        .collect::<Vec<_>>()
                })
                .collect();
            values.extend(part);
        }
        Self::new(first.cell_ids.clone(), values)
    }
}

/// δ(g) draws over `period` from all chains.
pub fn delta_field(chains: &[PosteriorDraws], period: Period, time: &TimeIndex) -> Result<DrawField> {
    let m = mean_t_star(time, period)?;
    DrawField::from_draws(chains, |c| prte(c, m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    Factual,
    Counterfactual,
    Difference,
}

impl World {
    pub fn name(&self) -> &'static str {
        match self {
            World::Factual => "factual",
            World::Counterfactual => "counterfactual",
            World::Difference => "difference",
        }
    }
}

/// Per-year trend draws (`β1`, `α1` or `β1 − α1`, divided by `sd(years)`).
pub fn trend_field(chains: &[PosteriorDraws], world: World, time: &TimeIndex) -> Result<DrawField> {
    let s = time.sd_year;
    DrawField::from_draws(chains, move |c| {
        let slope = match world {
            World::Factual => c.beta1,
            World::Counterfactual => c.alpha1,
            World::Difference => c.beta1 - c.alpha1,
        };
        slope / s
    })
}

/// Linear-interpolation sample quantile (R type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell_id: String,
    pub lon: f64,
    pub lat: f64,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Per-cell posterior summaries of a draw field.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSummary {
    pub label: String,
    pub period: Option<Period>,
    pub rows: Vec<SummaryRow>,
}

impl CausalSummary {
    pub fn from_field(field: &DrawField, graph: &GridGraph, label: impl Into<String>, period: Option<Period>) -> Result<Self> {
        if field.n_draws < 2 {
            return Err(Error::Domain("summaries need at least two draws".into()));
        }
        if graph.len() != field.n_cells() || graph.cells.iter().zip(&field.cell_ids).any(|(c, id)| &c.id != id) {
            return Err(Error::Domain("draw field is not aligned with the grid".into()));
        }
        let rows = (0..field.n_cells())
            .into_par_iter()
            .map(|g| {
                let mut v = field.cell(g);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                v.sort_by(f64::total_cmp);
                let c = &graph.cells[g];
                SummaryRow {
                    cell_id: c.id.clone(),
                    lon: c.lon,
                    lat: c.lat,
                    mean,
                    sd,
                    q05: quantile_sorted(&v, 0.05),
                    q50: quantile_sorted(&v, 0.5),
                    q95: quantile_sorted(&v, 0.95),
                }
            })
            .collect();
        Ok(Self { label: label.into(), period, rows })
    }

    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, label: impl Into<String>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let expected = ["cell_id", "lon", "lat", "mean", "sd", "q05", "q50", "q95"];
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        for (i, name) in expected.iter().enumerate() {
            if headers.get(i) != Some(name) {
                return Err(Error::Ingestion(format!(
                    "{}: column {} should be `{name}`, found `{}`",
                    path.display(),
                    i + 1,
                    headers.get(i).unwrap_or("")
                )));
            }
        }
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>().map_err(|e| Error::csv(path, e))?;
        Ok(Self { label: label.into(), period: None, rows })
    }
}

/// Summary of the trend draws for one world.
pub fn trend_summary(chains: &[PosteriorDraws], world: World, time: &TimeIndex, graph: &GridGraph) -> Result<CausalSummary> {
    let f = trend_field(chains, world, time)?;
    CausalSummary::from_field(&f, graph, format!("trend_{}", world.name()), None)
}
