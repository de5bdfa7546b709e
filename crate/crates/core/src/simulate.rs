//! Synthetic worlds: latent fields from a proper surrogate of the ICAR prior,
//! bivariate Hüsler-Reiss annual maxima, and ground-truth manifests.

use std::path::Path;

use nalgebra::{DMatrix, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremes::{self, CellParams, TimeIndex, N_PARAMS};
use crate::lattice::{Adjacency, Cell, CovariateTable, DesignMatrix, GridGraph, Mat7, N_COVARIATES};
use crate::maxstep::{self, CellSeries};
use crate::num;

pub const TRUTH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub nx: usize,
    pub ny: usize,
    /// Grid spacing in degrees.
    pub resolution: f64,
    /// Centroid of the south-west cell.
    pub lon0: f64,
    pub lat0: f64,
    pub start_year: i32,
    pub end_year: i32,
    /// Regression coefficients, slot-major (`7 × 5`).
    pub gamma: Vec<f64>,
    /// Cross-slot covariance of the latent field.
    pub sigma: [[f64; N_PARAMS]; N_PARAMS],
    /// Ridge added to `D − W`.
    pub tau: f64,
    pub adjacency: Adjacency,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let psi0 = extremes::shape_to_psi(-0.15).expect("valid shape");
        #[rustfmt::skip]
        let gamma = vec![
            30.0, -1.0, 0.3, -0.5, -0.3,     // alpha0
            0.2, 0.0, 0.0, 0.0, 0.0,         // alpha1
            30.6, -0.9, 0.45, -0.45, -0.4,   // beta0
            0.6, 0.05, 0.05, 0.0, 0.0,       // beta1
            0.4, 0.0, 0.0, 0.05, 0.0,        // sigma_star
            psi0, 0.0, 0.0, 0.0, 0.0,        // psi
            0.5, 0.0, 0.0, 0.0, 0.0,         // lambda_star
        ];
        let sd = [0.8, 0.1, 0.8, 0.1, 0.05, 0.05, 0.1];
        let mut sigma = [[0.0; N_PARAMS]; N_PARAMS];
        for i in 0..N_PARAMS {
            sigma[i][i] = sd[i] * sd[i];
        }
        for (i, j, r) in [(0, 2, 0.75), (1, 3, 0.5)] {
            sigma[i][j] = r * sd[i] * sd[j];
            sigma[j][i] = sigma[i][j];
        }
        Self {
            nx: 6,
            ny: 6,
            resolution: 1.0,
            lon0: -100.0,
            lat0: 35.0,
            start_year: 1850,
            end_year: 2014,
            gamma,
            sigma,
            tau: 0.01,
            adjacency: Adjacency::Rook,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn sigma_matrix(&self) -> Mat7 {
        Mat7::from_fn(|i, j| self.sigma[i][j])
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Validation("grid dimensions must be positive".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Validation("resolution must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!("ridge tau must be positive, got {}", self.tau)));
        }
        if self.end_year < self.start_year + 2 {
            return Err(Error::Validation("need at least three simulated years".into()));
        }
        if self.gamma.len() != N_PARAMS * N_COVARIATES {
            return Err(Error::Validation(format!(
                "gamma must have {} entries, got {}",
                N_PARAMS * N_COVARIATES,
                self.gamma.len()
            )));
        }
        let s = self.sigma_matrix();
        if (s - s.transpose()).amax() > 1e-12 || s.cholesky().is_none() {
            return Err(Error::Validation("latent covariance must be symmetric positive definite".into()));
        }
        Ok(())
    }

    pub fn time_index(&self) -> Result<TimeIndex> {
        TimeIndex::span(self.start_year, self.end_year)
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::with_capacity(self.n_cells());
        for r in 0..self.ny {
            for c in 0..self.nx {
                cells.push(Cell {
                    id: format!("r{r:02}c{c:02}"),
                    lon: self.lon0 + c as f64 * self.resolution,
                    lat: self.lat0 + r as f64 * self.resolution,
                });
            }
        }
        cells
    }

    pub fn graph(&self) -> Result<GridGraph> {
        GridGraph::build(self.cells(), self.resolution, self.adjacency)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Elevation and distance-to-sea as smooth functions of position plus
    /// seeded noise.
    pub fn covariates(&self) -> CovariateTable {
        let mut rng = self.rng(u64::MAX);
        let cells = self.cells();
        let mut t = CovariateTable {
            cell_ids: Vec::new(),
            lon: Vec::new(),
            lat: Vec::new(),
            elev_m: Vec::new(),
            seadist_km: Vec::new(),
            scaling: None,
        };
        for c in cells {
            let (u, v) = ((c.lon - self.lon0) * 0.7, (c.lat - self.lat0) * 0.9);
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            t.elev_m.push(600.0 + 350.0 * u.sin() + 200.0 * v.cos() + 40.0 * e1);
            t.seadist_km.push((250.0 + 120.0 * (0.5 * u + 0.3 * v).cos() + 15.0 * e2).max(0.0));
            t.cell_ids.push(c.id);
            t.lon.push(c.lon);
            t.lat.push(c.lat);
        }
        t
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthManifest {
    pub format_version: u32,
    pub seed: u64,
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub sigma: [[f64; N_PARAMS]; N_PARAMS],
    pub start_year: i32,
    pub end_year: i32,
    pub cells: Vec<TruthCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthCell {
    pub cell_id: String,
    pub lon: f64,
    pub lat: f64,
    pub eta: CellParams,
}

impl TruthManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    /// True δ(g) over the full simulated period (`β0 − α0`).
    pub fn delta(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.eta.beta0 - c.eta.alpha0).collect()
    }
}

/// `η ~ N(Xγ, (D − W + τI)⁻¹ ⊗ Σ)` with the draw taken from RNG stream 0.
/// Covariates enter z-scored, as in the fitted model.
pub fn draw_latent_field(config: &SimConfig) -> Result<(Vec<CellParams>, TruthManifest)> {
    config.validate()?;
    let graph = config.graph()?;
    let cov = config.covariates().standardized();
    let design = DesignMatrix::build(&graph, &cov)?;
    let mut rng = config.rng(0);
    let eta = latent_draw(&graph, &design, &config.gamma, &config.sigma_matrix(), config.tau, &mut rng)?;
    let params: Vec<CellParams> = eta.chunks(N_PARAMS).map(|c| CellParams::from_slice(c)).collect::<Result<_>>()?;
    for p in &params {
        p.validate()?;
    }
    let manifest = TruthManifest {
        format_version: TRUTH_FORMAT_VERSION,
        seed: config.seed,
        tau: config.tau,
        gamma: config.gamma.clone(),
        sigma: config.sigma,
        start_year: config.start_year,
        end_year: config.end_year,
        cells: graph
            .cells
            .iter()
            .zip(&params)
            .map(|(c, p)| TruthCell { cell_id: c.id.clone(), lon: c.lon, lat: c.lat, eta: *p })
            .collect(),
    };
    Ok((params, manifest))
}

/// One stacked draw of `Xγ + vec(L_Σ Z L_g⁻¹)`, where `L_g L_gᵀ = D − W + τI`.
pub fn latent_draw(
    graph: &GridGraph,
    design: &DesignMatrix,
    gamma: &[f64],
    sigma: &Mat7,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = graph.len();
    let q = graph.laplacian_dense() + DMatrix::identity(n, n) * tau;
    let lg = q.cholesky().ok_or_else(|| Error::Numerical("properized precision is not PD".into()))?;
    let ls = sigma.cholesky().ok_or_else(|| Error::Numerical("latent covariance is not PD".into()))?.l();
    // rows of zt are cells: solve L_gᵀ Yᵀ = Zᵀ
    let zt = DMatrix::<f64>::from_fn(n, N_PARAMS, |_, _| rng.sample(StandardNormal));
    let yt = lg.l().transpose().solve_upper_triangular(&zt).expect("non-singular triangular factor");
    let mean = design.mul(gamma);
    let mut eta = mean;
    for c in 0..n {
        let y = SMatrix::<f64, N_PARAMS, 1>::from_fn(|k, _| yt[(c, k)]);
        let f = ls * y;
        for k in 0..N_PARAMS {
            eta[N_PARAMS * c + k] += f[k];
        }
    }
    Ok(eta)
}

/// Exact draw of one `(y_cf, y_f)` pair: the counterfactual from its margin,
/// then the factual by inverting the conditional distribution.
pub fn sample_bhr_pair(c: &CellParams, t_star: f64, rng: &mut impl Rng) -> Result<(f64, f64)> {
    c.validate()?;
    let lambda = c.lambda();
    let sigma = c.sigma();
    let xi = c.xi();
    let from_exp = |mu: f64, b: f64| {
        // inverse of b = (1 + ξ(y−μ)/σ)^(−1/ξ)
        let lb = b.ln();
        if xi.abs() < 1e-12 {
            mu - sigma * lb
        } else {
            mu + sigma * (-xi * lb).exp_m1() / xi
        }
    };
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let la = (-u1.ln()).ln();
    let mut last_err = None;
    for attempt in 0..5 {
        let u2: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        match invert_conditional(la, u2.ln(), lambda, 30.0 * (attempt + 1) as f64) {
            Ok(lb) => {
                let x = from_exp(c.alpha0 + c.alpha1 * t_star, la.exp());
                let y = from_exp(c.beta0 + c.beta1 * t_star, lb.exp());
                return Ok((x, y));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Numerical("conditional inversion failed".into())))
}

/// `log P(B ≥ b | A = a) = a − V(a, b) + log Φ(q₁)` on unit-exponential
/// margins, decreasing in `b`.
fn log_conditional_survival(la: f64, lb: f64, lambda: f64) -> f64 {
    let w = la - lb;
    let q1 = 1.0 / lambda + 0.5 * lambda * w;
    let q2 = 1.0 / lambda - 0.5 * lambda * w;
    let v = (la + num::log_norm_cdf(q1)).exp() + (lb + num::log_norm_cdf(q2)).exp();
    la.exp() - v + num::log_norm_cdf(q1)
}

/// Solve for `log b` by bisection; the bracket grows geometrically up to
/// `max_width` on either side of `log a`.
fn invert_conditional(la: f64, log_u: f64, lambda: f64, max_width: f64) -> Result<f64> {
    let f = |lb: f64| log_conditional_survival(la, lb, lambda) - log_u;
    let mut w = 1.0;
    let (mut lo, mut hi) = (la - w, la + w);
    while f(lo) < 0.0 || f(hi) > 0.0 {
        w *= 2.0;
        if w > max_width {
            return Err(Error::Numerical(format!(
                "no bracket for the conditional quantile (log a = {la}, log u = {log_u}, lambda = {lambda})"
            )));
        }
        lo = la - w;
        hi = la + w;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 * mid.abs().max(1.0) {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Annual maxima for every cell; cell `i` draws from RNG stream `i + 1`.
pub fn simulate_series(config: &SimConfig, params: &[CellParams]) -> Result<Vec<CellSeries>> {
    let time = config.time_index()?;
    let cells = config.cells();
    if cells.len() != params.len() {
        return Err(Error::Domain(format!("{} parameter sets for {} cells", params.len(), cells.len())));
    }
    cells
        .par_iter()
        .zip(params)
        .enumerate()
        .map(|(i, (cell, p))| {
            let mut rng = config.rng(i as u64 + 1);
            let mut y_cf = Vec::with_capacity(time.len());
            let mut y_f = Vec::with_capacity(time.len());
            for &t in &time.t_star {
                let (a, b) = sample_bhr_pair(p, t, &mut rng)?;
                y_cf.push(a);
                y_f.push(b);
            }
            CellSeries::new(cell.id.clone(), time.clone(), y_cf, y_f)
        })
        .collect()
}

/// Paths written by [`generate_panel`].
#[derive(Debug, Clone)]
pub struct GeneratedFiles {
    pub panel: std::path::PathBuf,
    pub covariates: std::path::PathBuf,
    pub truth: std::path::PathBuf,
}

/// Write `panel.csv`, `covariates.csv` and `truth.json` into `dir`.
pub fn generate_panel(config: &SimConfig, dir: &Path) -> Result<GeneratedFiles> {
    let (params, truth) = draw_latent_field(config)?;
    let panel = simulate_series(config, &params)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = GeneratedFiles {
        panel: dir.join("panel.csv"),
        covariates: dir.join("covariates.csv"),
        truth: dir.join("truth.json"),
    };
    maxstep::write_panel_csv(&files.panel, &panel)?;
    config.covariates().write_csv(&files.covariates)?;
    truth.write(&files.truth)?;
    Ok(files)
}
