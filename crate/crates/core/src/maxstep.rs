//! The Max step: per-cell generalized maximum likelihood under the
//! bivariate Hüsler-Reiss model with the shape prior, plus a Gaussian
//! (Laplace) summary of each cell's likelihood.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremes::{self, CellParams, ShapeTransformConstants, TimeIndex, N_PARAMS, PARAM_NAMES};
use crate::lattice::{GridGraph, Mat7};
use crate::num::Dual;
use crate::optim::{self, BfgsOptions};

/// Paired annual maxima of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSeries {
    pub cell_id: String,
    pub time: TimeIndex,
    pub y_cf: Vec<f64>,
    pub y_f: Vec<f64>,
}

impl CellSeries {
    pub fn new(cell_id: impl Into<String>, time: TimeIndex, y_cf: Vec<f64>, y_f: Vec<f64>) -> Result<Self> {
        let s = Self { cell_id: cell_id.into(), time, y_cf, y_f };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.time.len();
        if self.y_cf.len() != n || self.y_f.len() != n {
            return Err(Error::Ingestion(format!(
                "cell {}: {} years but {} counterfactual and {} factual values",
                self.cell_id,
                n,
                self.y_cf.len(),
                self.y_f.len()
            )));
        }
        if self.y_cf.iter().chain(&self.y_f).any(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!("cell {}: non-finite annual maximum", self.cell_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y_cf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_cf.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PanelRecord {
    cell_id: String,
    year: i32,
    y_cf: f64,
    y_f: f64,
}

/// Read a long-format panel. Cells keep their first-appearance order; years
/// are standardized over `reference` (or over the panel's own years).
pub fn read_panel_csv(path: &Path, period: Option<(i32, i32)>) -> Result<Vec<CellSeries>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["cell_id", "year", "y_cf", "y_f"] {
        return Err(Error::Ingestion(format!("{}: expected header cell_id,year,y_cf,y_f", path.display())));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i32, f64, f64)>> = HashMap::new();
    for rec in rdr.deserialize::<PanelRecord>() {
        let r = rec.map_err(|e| Error::csv(path, e))?;
        if let Some((a, b)) = period {
            if r.year < a || r.year > b {
                continue;
            }
        }
        let entry = rows.entry(r.cell_id.clone()).or_insert_with(|| {
            order.push(r.cell_id.clone());
            Vec::new()
        });
        entry.push((r.year, r.y_cf, r.y_f));
    }
    if order.is_empty() {
        return Err(Error::Ingestion(format!("{}: no panel rows in the configured period", path.display())));
    }
    let mut years: Option<Vec<i32>> = None;
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut r = rows.remove(&id).unwrap_or_default();
        r.sort_by_key(|x| x.0);
        let ys: Vec<i32> = r.iter().map(|x| x.0).collect();
        if ys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Ingestion(format!("{}: cell {id} has duplicate years", path.display())));
        }
        match &years {
            None => years = Some(ys.clone()),
            Some(y0) if *y0 != ys => {
                return Err(Error::Ingestion(format!(
                    "{}: cell {id} does not share the panel's year set",
                    path.display()
                )))
            }
            _ => {}
        }
        out.push((id, r));
    }
    let years = years.unwrap_or_default();
    let reference: Vec<i32> = match period {
        Some((a, b)) => (a..=b).collect(),
        None => years.clone(),
    };
    if let Some((a, b)) = period {
        if years.len() != (b - a + 1) as usize {
            return Err(Error::Ingestion(format!(
                "{}: panel has {} of the {} years in {a}..={b}",
                path.display(),
                years.len(),
                b - a + 1
            )));
        }
    }
    let time = TimeIndex::with_reference(years, &reference)?;
    out.into_iter()
        .map(|(id, r)| {
            CellSeries::new(id, time.clone(), r.iter().map(|x| x.1).collect(), r.iter().map(|x| x.2).collect())
        })
        .collect()
}

pub fn write_panel_csv(path: &Path, panel: &[CellSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for s in panel {
        for (t, &year) in s.time.years.iter().enumerate() {
            w.serialize(PanelRecord { cell_id: s.cell_id.clone(), year, y_cf: s.y_cf[t], y_f: s.y_f[t] })
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reorder a panel to the graph's cell order.
pub fn align_panel(panel: Vec<CellSeries>, graph: &GridGraph) -> Result<Vec<CellSeries>> {
    if panel.len() != graph.len() {
        return Err(Error::Ingestion(format!(
            "panel has {} cells but the grid has {}",
            panel.len(),
            graph.len()
        )));
    }
    let mut by_id: HashMap<String, CellSeries> = panel.into_iter().map(|s| (s.cell_id.clone(), s)).collect();
    graph
        .cells
        .iter()
        .map(|c| by_id.remove(&c.id).ok_or_else(|| Error::Ingestion(format!("no panel rows for cell {}", c.id))))
        .collect()
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

fn loglik_generic<S: crate::num::Scalar>(eta: &[S; N_PARAMS], s: &CellSeries, k: &ShapeTransformConstants) -> S {
    let mut total = extremes::psi_log_prior_eta(eta[5], k);
    for t in 0..s.len() {
        match extremes::bhr_logpdf_eta(s.y_cf[t], s.y_f[t], eta, s.time.t_star[t], k) {
            Some(v) => total = total + v,
            None => return S::cst(f64::NEG_INFINITY),
        }
    }
    total
}

/// Generalized log-likelihood: BHR log-density summed over years plus the
/// shape prior. `−∞` when any observation leaves the support.
pub fn cell_loglik(eta: &CellParams, series: &CellSeries) -> f64 {
    let v = loglik_generic(&eta.to_array(), series, &ShapeTransformConstants::default());
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Log-likelihood and its exact gradient (forward-mode differentiation).
pub fn cell_loglik_grad(eta: &[f64; N_PARAMS], series: &CellSeries) -> (f64, [f64; N_PARAMS]) {
    let seeded = Dual::<N_PARAMS>::seed(eta);
    let out = loglik_generic(&seeded, series, &ShapeTransformConstants::default());
    if !out.v.is_finite() {
        return (f64::NEG_INFINITY, [0.0; N_PARAMS]);
    }
    (out.v, out.d)
}

/// Negative Hessian of the log-likelihood by central differences of the
/// exact gradient, symmetrized.
pub fn negative_hessian(eta: &[f64; N_PARAMS], series: &CellSeries) -> Mat7 {
    let h0 = f64::EPSILON.cbrt();
    let mut h = Mat7::zeros();
    for j in 0..N_PARAMS {
        let step = h0 * eta[j].abs().max(1.0);
        let mut up = *eta;
        let mut dn = *eta;
        up[j] += step;
        dn[j] -= step;
        let (_, gu) = cell_loglik_grad(&up, series);
        let (_, gd) = cell_loglik_grad(&dn, series);
        for i in 0..N_PARAMS {
            h[(i, j)] = -(gu[i] - gd[i]) / (2.0 * step);
        }
    }
    (h + h.transpose()) * 0.5
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Probability-weighted-moment GEV estimate `(μ, σ, ξ)`.
pub fn gev_pwm(sample: &[f64]) -> Result<(f64, f64, f64)> {
    let n = sample.len();
    if n < 3 {
        return Err(Error::Domain("PWM needs at least three observations".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let i = i as f64;
        b0 += v;
        b1 += v * i / (nf - 1.0);
        b2 += v * i * (i - 1.0) / ((nf - 1.0) * (nf - 2.0));
    }
    b0 /= nf;
    b1 /= nf;
    b2 /= nf;
    let l2 = 2.0 * b1 - b0;
    if !(l2 > 1e-12 * b0.abs().max(1.0)) {
        return Err(Error::NonConvergence("degenerate series (zero spread)".into()));
    }
    let c = l2 / (3.0 * b2 - b0) - std::f64::consts::LN_2 / 3f64.ln();
    let k = 7.8590 * c + 2.9554 * c * c;
    if k.abs() < 1e-6 {
        let sigma = l2 / std::f64::consts::LN_2;
        return Ok((b0 - 0.577_215_664_901_532_9 * sigma, sigma, 0.0));
    }
    let g = libm::tgamma(1.0 + k);
    let sigma = l2 * k / (g * (1.0 - 2f64.powf(-k)));
    let mu = b0 + sigma * (g - 1.0) / k;
    Ok((mu, sigma, -k))
}

fn ols_slope(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|v| (v - mt).powi(2)).sum();
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mt, slope)
}

/// Seed from per-world trend regressions and PWM fits of the detrended
/// maxima; dependence starts at `λ* = 0`.
pub fn initial_params(series: &CellSeries) -> Result<CellParams> {
    let t = &series.time.t_star;
    let world = |y: &[f64]| -> Result<(f64, f64, f64, f64)> {
        let (_, slope) = ols_slope(t, y);
        let resid: Vec<f64> = y.iter().zip(t).map(|(v, tt)| v - slope * tt).collect();
        let (mu, sigma, xi) = gev_pwm(&resid)?;
        Ok((mu, slope, sigma, xi))
    };
    let (a0, a1, s_cf, xi_cf) = world(&series.y_cf)?;
    let (b0, b1, s_f, xi_f) = world(&series.y_f)?;
    let xi = (0.5 * (xi_cf + xi_f)).clamp(-0.45, 0.45);
    let sigma = 0.5 * (s_cf + s_f);
    let mut p = CellParams {
        alpha0: a0,
        alpha1: a1,
        beta0: b0,
        beta1: b1,
        sigma_star: sigma.ln(),
        psi: extremes::shape_to_psi(xi)?,
        lambda_star: 0.0,
    };
    make_feasible(&mut p, series);
    Ok(p)
}

/// Inflate the scale until every observation lies inside both supports.
fn make_feasible(p: &mut CellParams, series: &CellSeries) {
    for _ in 0..60 {
        if cell_loglik(p, series).is_finite() {
            return;
        }
        p.sigma_star += 0.25;
    }
}

// ---------------------------------------------------------------------------
// Per-cell fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaxOptions {
    /// Minimum number of paired observations per cell.
    pub min_obs: usize,
    pub restarts: usize,
    /// Relative jitter of restart seeds.
    pub jitter: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub simplex_iters: usize,
    /// Run fails when more than this fraction of cells is flagged.
    pub max_flagged_frac: f64,
    pub seed: u64,
}

impl Default for MaxOptions {
    fn default() -> Self {
        Self {
            min_obs: 30,
            restarts: 5,
            jitter: 0.1,
            max_iter: 2000,
            grad_tol: 1e-6,
            simplex_iters: 200,
            max_flagged_frac: 0.2,
            seed: 20_240_601,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Converged,
    /// Converged, but the negative Hessian needed eigenvalue repair.
    RepairedHessian,
    /// Excluded from smoothing.
    Failed,
}

impl CellStatus {
    pub fn usable(&self) -> bool {
        !matches!(self, CellStatus::Failed)
    }
}

#[derive(Debug, Clone)]
pub struct CellFit {
    pub params: CellParams,
    /// Covariance block `(−H)⁻¹`.
    pub covariance: Mat7,
    /// Precision block `−H` (after any repair).
    pub precision: Mat7,
    pub status: CellStatus,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub restarts_used: usize,
}

impl CellFit {
    pub fn standard_errors(&self) -> [f64; N_PARAMS] {
        std::array::from_fn(|i| self.covariance[(i, i)].sqrt())
    }
}

fn minimize_from(start: [f64; N_PARAMS], series: &CellSeries, opts: &MaxOptions) -> optim::Minimum<N_PARAMS> {
    let fg = |x: &[f64; N_PARAMS]| {
        let (f, g) = cell_loglik_grad(x, series);
        (-f, g.map(|v| -v))
    };
    let mut x0 = start;
    let (f0, _) = fg(&x0);
    let bopts = BfgsOptions { max_iter: opts.max_iter, grad_tol: opts.grad_tol, ..Default::default() };
    let probe = optim::bfgs(fg, x0, &BfgsOptions { max_iter: 1, ..bopts });
    if !f0.is_finite() || (probe.iterations > 0 && probe.f >= f0 && !probe.converged) {
        let sd = start[4].exp();
        let steps = [sd, 0.2 * sd, sd, 0.2 * sd, 0.2, 0.2, 0.5];
        let (x, _) = optim::nelder_mead(|x| fg(x).0, x0, steps, opts.simplex_iters);
        x0 = x;
    }
    let mut m = optim::bfgs(fg, x0, &bopts);
    // Newton polish with the finite-difference Hessian
    for _ in 0..5 {
        if !m.f.is_finite() {
            break;
        }
        let nh = negative_hessian(&m.x, series);
        let Some(chol) = nh.cholesky() else { break };
        let g = nalgebra::SVector::<f64, N_PARAMS>::from_column_slice(&m.grad.map(|v| -v));
        let step = chol.solve(&g);
        let xn: [f64; N_PARAMS] = std::array::from_fn(|i| m.x[i] + step[i]);
        let (fn_, gn) = fg(&xn);
        if fn_.is_finite() && fn_ <= m.f + 1e-10 * m.f.abs().max(1.0) {
            let gmax = gn.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            m = optim::Minimum { x: xn, f: fn_, grad: gn, iterations: m.iterations + 1, converged: gmax < opts.grad_tol };
            if gmax < opts.grad_tol * 1e-2 {
                break;
            }
        } else {
            break;
        }
    }
    m
}

/// Fit one cell: maximize the generalized likelihood and summarize it by
/// `(η̂, (−H)⁻¹)`.
pub fn fit_cell(series: &CellSeries, init: Option<CellParams>, opts: &MaxOptions, stream: u64) -> Result<CellFit> {
    series.validate()?;
    if series.len() < opts.min_obs {
        return Err(Error::Domain(format!(
            "cell {}: {} paired observations, need at least {}",
            series.cell_id,
            series.len(),
            opts.min_obs
        )));
    }
    let seed = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => initial_params(series)?,
    };
    let seed = seed.to_array();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let scale = seed[4].exp();
    let mut best: Option<(optim::Minimum<N_PARAMS>, usize)> = None;
    for attempt in 0..=opts.restarts {
        let start = if attempt == 0 {
            seed
        } else {
            let base = best.as_ref().map_or(seed, |b| b.0.x);
            std::array::from_fn(|i| {
                let z: f64 = rng.sample(StandardNormal);
                // locations jitter on the data scale, the rest relative to magnitude
                let s = if i < 4 { scale } else { base[i].abs().max(1.0) };
                base[i] + opts.jitter * s * z
            })
        };
        let m = minimize_from(start, series, opts);
        let better = best.as_ref().is_none_or(|b| m.f.is_finite() && (m.f < b.0.f || !b.0.converged && m.converged));
        if better {
            best = Some((m, attempt));
        }
        if best.as_ref().is_some_and(|b| b.0.converged) {
            break;
        }
    }
    let (m, restarts_used) = best.expect("at least one attempt");
    let grad_norm = m.grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !m.f.is_finite() || !m.converged {
        return Err(Error::NonConvergence(format!(
            "cell {}: no stationary point after {} restarts (|grad|∞ = {grad_norm:e})",
            series.cell_id, opts.restarts
        )));
    }
    let nh = negative_hessian(&m.x, series);
    let (precision, repaired) = repair_pd(&nh)?;
    let covariance = precision
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("cell {}: singular Hessian block", series.cell_id)))?;
    let covariance = (covariance + covariance.transpose()) * 0.5;
    Ok(CellFit {
        params: CellParams::from_array(m.x),
        covariance,
        precision,
        status: if repaired { CellStatus::RepairedHessian } else { CellStatus::Converged },
        loglik: -m.f,
        grad_norm,
        iterations: m.iterations,
        restarts_used,
    })
}

/// Clamp eigenvalues below `1e-8 · λ_max`. Returns the repaired matrix and
/// whether any clamping happened.
pub fn repair_pd(m: &Mat7) -> Result<(Mat7, bool)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Numerical("Hessian block has no positive curvature".into()));
    }
    let floor = 1e-8 * max;
    if eig.eigenvalues.iter().all(|&v| v > floor) {
        return Ok((sym, false));
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let r = eig.eigenvectors * Mat7::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(((r + r.transpose()) * 0.5, true))
}

// ---------------------------------------------------------------------------
// Whole panel
// ---------------------------------------------------------------------------

/// Stacked Max-step output in graph cell order.
#[derive(Debug, Clone)]
pub struct MaxStepResult {
    pub cell_ids: Vec<String>,
    /// Length `7N`, cell-major.
    pub eta_hat: Vec<f64>,
    /// Covariance blocks of `Σ_η̂`.
    pub covariance: Vec<Mat7>,
    /// Precision blocks `Σ_η̂⁻¹` (zero for failed cells).
    pub precision: Vec<Mat7>,
    pub status: Vec<CellStatus>,
    pub loglik: Vec<f64>,
    pub messages: Vec<Option<String>>,
}

impl MaxStepResult {
    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn cell(&self, i: usize) -> CellParams {
        CellParams::from_slice(&self.eta_hat[N_PARAMS * i..N_PARAMS * (i + 1)]).expect("seven entries")
    }

    pub fn n_flagged(&self) -> usize {
        self.status.iter().filter(|s| !matches!(s, CellStatus::Converged)).count()
    }

    pub fn n_failed(&self) -> usize {
        self.status.iter().filter(|s| !s.usable()).count()
    }

    /// Dense `Σ_η̂` (`7N × 7N`), for checks on small grids.
    pub fn covariance_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = N_PARAMS * self.n_cells();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (c, b) in self.covariance.iter().enumerate() {
            for i in 0..N_PARAMS {
                for j in 0..N_PARAMS {
                    m[(N_PARAMS * c + i, N_PARAMS * c + j)] = b[(i, j)];
                }
            }
        }
        m
    }

    /// Re-align to another cell order (for example the graph's).
    pub fn aligned_to(&self, graph: &GridGraph) -> Result<Self> {
        let pos: HashMap<&str, usize> = self.cell_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut out = Self {
            cell_ids: Vec::new(),
            eta_hat: Vec::new(),
            covariance: Vec::new(),
            precision: Vec::new(),
            status: Vec::new(),
            loglik: Vec::new(),
            messages: Vec::new(),
        };
        if graph.len() != self.n_cells() {
            return Err(Error::Ingestion(format!(
                "Max-step result has {} cells but the grid has {}",
                self.n_cells(),
                graph.len()
            )));
        }
        for c in &graph.cells {
            let i = *pos
                .get(c.id.as_str())
                .ok_or_else(|| Error::Ingestion(format!("no Max-step estimate for cell {}", c.id)))?;
            out.cell_ids.push(self.cell_ids[i].clone());
            out.eta_hat.extend_from_slice(&self.eta_hat[N_PARAMS * i..N_PARAMS * (i + 1)]);
            out.covariance.push(self.covariance[i]);
            out.precision.push(self.precision[i]);
            out.status.push(self.status[i]);
            out.loglik.push(self.loglik[i]);
            out.messages.push(self.messages[i].clone());
        }
        Ok(out)
    }
}

/// Fit every cell independently on `parallelism` worker threads. The output
/// does not depend on the number of workers.
pub fn run_max(panel: &[CellSeries], opts: &MaxOptions, parallelism: usize) -> Result<MaxStepResult> {
    if panel.is_empty() {
        return Err(Error::Domain("empty panel".into()));
    }
    let t0 = &panel[0].time;
    if let Some(s) = panel.iter().find(|s| s.time.years != t0.years) {
        return Err(Error::Ingestion(format!("cell {} does not share the panel's time index", s.cell_id)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;
    let fits: Vec<Result<CellFit>> =
        pool.install(|| panel.par_iter().enumerate().map(|(i, s)| fit_cell(s, None, opts, i as u64)).collect());

    let mut res = MaxStepResult {
        cell_ids: Vec::with_capacity(panel.len()),
        eta_hat: Vec::with_capacity(N_PARAMS * panel.len()),
        covariance: Vec::with_capacity(panel.len()),
        precision: Vec::with_capacity(panel.len()),
        status: Vec::with_capacity(panel.len()),
        loglik: Vec::with_capacity(panel.len()),
        messages: Vec::with_capacity(panel.len()),
    };
    for (s, fit) in panel.iter().zip(fits) {
        res.cell_ids.push(s.cell_id.clone());
        match fit {
            Ok(f) => {
                res.eta_hat.extend_from_slice(&f.params.to_array());
                res.covariance.push(f.covariance);
                res.precision.push(f.precision);
                res.status.push(f.status);
                res.loglik.push(f.loglik);
                res.messages.push(None);
            }
            Err(e @ (Error::NonConvergence(_) | Error::Numerical(_))) => {
                log::warn!("cell {} excluded from smoothing: {e}", s.cell_id);
                let fallback = initial_params(s).map(|p| p.to_array()).unwrap_or([f64::NAN; N_PARAMS]);
                res.eta_hat.extend_from_slice(&fallback);
                res.covariance.push(Mat7::zeros());
                res.precision.push(Mat7::zeros());
                res.status.push(CellStatus::Failed);
                res.loglik.push(f64::NAN);
                res.messages.push(Some(e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let frac = res.n_flagged() as f64 / res.n_cells() as f64;
    if frac > opts.max_flagged_frac {
        return Err(Error::NonConvergence(format!(
            "{} of {} cells were flagged (limit {:.0}%)",
            res.n_flagged(),
            res.n_cells(),
            100.0 * opts.max_flagged_frac
        )));
    }
    Ok(res)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxManifest {
    pub seed: u64,
    pub options: MaxOptions,
    pub cells: Vec<MaxManifestCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxManifestCell {
    pub cell_id: String,
    pub status: CellStatus,
    pub loglik: Option<f64>,
    pub message: Option<String>,
}

fn upper_pairs() -> Vec<(usize, usize)> {
    (0..N_PARAMS).flat_map(|i| (i..N_PARAMS).map(move |j| (i, j))).collect()
}

/// Writes `eta_hat.csv`, `hessian_blocks.csv` (upper triangle of each
/// negative-Hessian block `Σ_η̂⁻¹`) and `max_manifest.json`.
pub fn write_max_result(dir: &Path, res: &MaxStepResult, opts: &MaxOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("eta_hat.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    let mut header = vec!["cell_id".to_string()];
    header.extend(PARAM_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| Error::csv(&p, e))?;
    for (i, id) in res.cell_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(res.eta_hat[N_PARAMS * i..N_PARAMS * (i + 1)].iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("hessian_blocks.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    let pairs = upper_pairs();
    let mut header = vec!["cell_id".to_string()];
    header.extend(pairs.iter().map(|(i, j)| format!("h_{i}{j}")));
    w.write_record(&header).map_err(|e| Error::csv(&p, e))?;
    for (c, id) in res.cell_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(pairs.iter().map(|&(i, j)| format!("{:e}", res.precision[c][(i, j)])));
        w.write_record(&rec).map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let manifest = MaxManifest {
        seed: opts.seed,
        options: *opts,
        cells: res
            .cell_ids
            .iter()
            .enumerate()
            .map(|(i, id)| MaxManifestCell {
                cell_id: id.clone(),
                status: res.status[i],
                loglik: res.loglik[i].is_finite().then_some(res.loglik[i]),
                message: res.messages[i].clone(),
            })
            .collect(),
    };
    let p = dir.join("max_manifest.json");
    let s = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&p, e))?;
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

pub fn read_max_result(dir: &Path) -> Result<MaxStepResult> {
    let p = dir.join("max_manifest.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: MaxManifest = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;

    let p = dir.join("eta_hat.csv");
    let mut rdr = csv::Reader::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    let mut cell_ids = Vec::new();
    let mut eta_hat = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(&p, e))?;
        if rec.len() != N_PARAMS + 1 {
            return Err(Error::Ingestion(format!("{}: expected {} columns", p.display(), N_PARAMS + 1)));
        }
        cell_ids.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            eta_hat.push(parse_f64(v, &p)?);
        }
    }

    let p = dir.join("hessian_blocks.csv");
    let mut rdr = csv::Reader::from_path(&p).map_err(|e| Error::csv(&p, e))?;
    let pairs = upper_pairs();
    let mut precision = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(&p, e))?;
        if rec.len() != pairs.len() + 1 || cell_ids.get(row).map(String::as_str) != Some(&rec[0]) {
            return Err(Error::Ingestion(format!("{}: row {} does not match eta_hat.csv", p.display(), row + 1)));
        }
        let mut m = Mat7::zeros();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let v = parse_f64(&rec[k + 1], &p)?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        precision.push(m);
    }
    if precision.len() != cell_ids.len() || manifest.cells.len() != cell_ids.len() {
        return Err(Error::Ingestion(format!("{}: inconsistent Max-step artifacts", dir.display())));
    }
    let status: Vec<CellStatus> = manifest.cells.iter().map(|c| c.status).collect();
    let covariance = precision
        .iter()
        .zip(&status)
        .map(|(m, s)| if s.usable() { m.try_inverse().unwrap_or_else(Mat7::zeros) } else { Mat7::zeros() })
        .collect();
    Ok(MaxStepResult {
        cell_ids,
        eta_hat,
        covariance,
        precision,
        status,
        loglik: manifest.cells.iter().map(|c| c.loglik.unwrap_or(f64::NAN)).collect(),
        messages: manifest.cells.iter().map(|c| c.message.clone()).collect(),
    })
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Ingestion(format!("{}: cannot parse number {s:?}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{sample_bhr_pair, SimConfig};

    fn truth() -> CellParams {
        CellParams {
            alpha0: 30.0,
            alpha1: 0.3,
            beta0: 30.8,
            beta1: 0.7,
            sigma_star: 1.2f64.ln(),
            psi: extremes::shape_to_psi(-0.15).unwrap(),
            lambda_star: 0.4,
        }
    }

    fn synthetic(p: &CellParams, years: i32, seed: u64) -> CellSeries {
        let time = TimeIndex::span(1850, 1850 + years - 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &t in &time.t_star {
            let (x, y) = sample_bhr_pair(p, t, &mut rng).unwrap();
            a.push(x);
            b.push(y);
        }
        CellSeries::new("g", time, a, b).unwrap()
    }

    #[test]
    fn independence_factorizes() {
        let mut p = truth();
        p.lambda_star = -10.0;
        let time = TimeIndex::with_reference(vec![2000], &[1999, 2000, 2001]).unwrap();
        let s = CellSeries::new("g", time, vec![31.0], vec![30.2]).unwrap();
        let expect = extremes::gev_logpdf(31.0, &p.counterfactual(0.0)).unwrap()
            + extremes::gev_logpdf(30.2, &p.factual(0.0)).unwrap()
            + extremes::psi_log_prior(p.psi);
        assert!((cell_loglik(&p, &s) - expect).abs() < 1e-5);
    }

    #[test]
    fn support_violation_is_minus_infinity() {
        let p = truth();
        let s = synthetic(&p, 40, 1);
        let mut bad = s.clone();
        // above the upper endpoint of a ξ < 0 margin
        bad.y_f[3] = 1e6;
        assert_eq!(cell_loglik(&p, &bad), f64::NEG_INFINITY);
        assert!(cell_loglik(&p, &s).is_finite());
    }

    #[test]
    fn matches_mixed_difference_density() {
        let p = truth();
        let s = synthetic(&p, 5, 2);
        let h = 1e-3;
        let f = |x: f64, y: f64, t: f64| extremes::bhr_cdf(x, y, &p, t).unwrap();
        let mut total = extremes::psi_log_prior(p.psi);
        for t in 0..5 {
            let (x, y, ts) = (s.y_cf[t], s.y_f[t], s.time.t_star[t]);
            let d = (f(x + h, y + h, ts) - f(x + h, y - h, ts) - f(x - h, y + h, ts) + f(x - h, y - h, ts)) / (4.0 * h * h);
            total += d.ln();
        }
        let v = cell_loglik(&p, &s);
        assert!(((v - total) / total).abs() < 1e-4, "{v} vs {total}");
    }

    #[test]
    fn scale_far_from_optimum_lowers_likelihood() {
        let p = truth();
        let s = synthetic(&p, 80, 3);
        let mut q = p;
        q.sigma_star += 1.5;
        assert!(cell_loglik(&q, &s) < cell_loglik(&p, &s));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = truth();
        let s = synthetic(&p, 60, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut checked = 0;
        while checked < 50 {
            let x: [f64; 7] = std::array::from_fn(|i| {
                let z: f64 = rng.sample(StandardNormal);
                p.to_array()[i] + 0.1 * z
            });
            let (f, g) = cell_loglik_grad(&x, &s);
            if !f.is_finite() {
                continue;
            }
            checked += 1;
            for j in 0..7 {
                let h = 1e-6 * x[j].abs().max(1.0);
                let mut up = x;
                let mut dn = x;
                up[j] += h;
                dn[j] -= h;
                let fd = (cell_loglik(&CellParams::from_array(up), &s) - cell_loglik(&CellParams::from_array(dn), &s))
                    / (2.0 * h);
                let scale = g[j].abs().max(1.0);
                assert!((fd - g[j]).abs() / scale < 1e-5, "param {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn fit_is_stationary_with_pd_hessian() {
        let p = truth();
        let s = synthetic(&p, 165, 5);
        let fit = fit_cell(&s, None, &MaxOptions::default(), 0).unwrap();
        let x = fit.params.to_array();
        for j in 0..7 {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut up = x;
            let mut dn = x;
            up[j] += h;
            dn[j] -= h;
            let fd = (cell_loglik(&CellParams::from_array(up), &s) - cell_loglik(&CellParams::from_array(dn), &s)) / (2.0 * h);
            assert!(fd.abs() * x[j].abs().max(1.0) < 1e-4, "gradient {j}: {fd}");
        }
        let h = fit.precision;
        assert!((h - h.transpose()).amax() < 1e-8);
        assert!(SymmetricEigen::new(h).eigenvalues.min() > 0.0);
        let se = fit.standard_errors();
        for (j, (a, b)) in x.iter().zip(p.to_array()).enumerate() {
            assert!((a - b).abs() < 4.0 * se[j], "param {j}: {a} vs {b} (se {})", se[j]);
        }
    }

    #[test]
    fn independent_worlds_give_weak_dependence() {
        let mut p = truth();
        p.lambda_star = -6.0;
        let s = synthetic(&p, 165, 6);
        let fit = fit_cell(&s, None, &MaxOptions::default(), 0).unwrap();
        assert!(fit.params.lambda_star < -2.0, "{}", fit.params.lambda_star);
    }

    #[test]
    fn constant_series_does_not_converge() {
        let time = TimeIndex::span(1900, 1949).unwrap();
        let s = CellSeries::new("flat", time, vec![25.0; 50], vec![25.0; 50]).unwrap();
        assert!(matches!(fit_cell(&s, None, &MaxOptions::default(), 0), Err(Error::NonConvergence(_))));
    }

    #[test]
    fn short_series_is_rejected() {
        let s = synthetic(&truth(), 20, 7);
        assert!(matches!(fit_cell(&s, None, &MaxOptions::default(), 0), Err(Error::Domain(_))));
    }

    #[test]
    fn pwm_recovers_gumbel_like_sample() {
        let g = extremes::GevParams::new(5.0, 2.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..20_000).map(|_| extremes::return_level(rng.random::<f64>(), &g).unwrap()).collect();
        let (mu, sigma, xi) = gev_pwm(&xs).unwrap();
        assert!((mu - 5.0).abs() < 0.1 && (sigma - 2.0).abs() < 0.1 && (xi - 0.1).abs() < 0.03);
    }

    fn small_panel() -> Vec<CellSeries> {
        let cfg = SimConfig { nx: 3, ny: 3, start_year: 1900, end_year: 1979, ..SimConfig::default() };
        let (params, _) = crate::simulate::draw_latent_field(&cfg).unwrap();
        crate::simulate::simulate_series(&cfg, &params).unwrap()
    }

    #[test]
    fn single_cell_panel_matches_fit_cell() {
        let s = synthetic(&truth(), 100, 10);
        let opts = MaxOptions::default();
        let r = run_max(std::slice::from_ref(&s), &opts, 1).unwrap();
        let f = fit_cell(&s, None, &opts, 0).unwrap();
        assert_eq!(r.eta_hat, f.params.to_array().to_vec());
        assert_eq!(r.covariance[0], f.covariance);
    }

    #[test]
    fn worker_count_does_not_change_estimates() {
        let panel = small_panel();
        let opts = MaxOptions::default();
        let a = run_max(&panel, &opts, 1).unwrap();
        let b = run_max(&panel, &opts, 8).unwrap();
        assert_eq!(a.eta_hat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.eta_hat.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.precision, b.precision);
    }

    #[test]
    fn covariance_is_block_diagonal() {
        let panel = small_panel();
        let r = run_max(&panel, &MaxOptions::default(), 4).unwrap();
        let d = r.covariance_dense();
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                if i / 7 != j / 7 {
                    assert_eq!(d[(i, j)], 0.0);
                }
            }
        }
        assert!(d.diagonal().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn artifacts_round_trip() {
        let panel = small_panel();
        let opts = MaxOptions::default();
        let r = run_max(&panel, &opts, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_max_result(dir.path(), &r, &opts).unwrap();
        let back = read_max_result(dir.path()).unwrap();
        assert_eq!(back.cell_ids, r.cell_ids);
        for (a, b) in back.eta_hat.iter().zip(&r.eta_hat) {
            assert_eq!(a, b);
        }
        for (a, b) in back.precision.iter().zip(&r.precision) {
            assert_eq!((a - b).amax(), 0.0);
        }
        let header = std::fs::read_to_string(dir.path().join("hessian_blocks.csv")).unwrap();
        assert_eq!(header.lines().next().unwrap().split(',').count(), 29);
    }

    #[test]
    fn panel_csv_round_trip_and_period_filter() {
        let panel = small_panel();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("panel.csv");
        write_panel_csv(&p, &panel).unwrap();
        let back = read_panel_csv(&p, None).unwrap();
        assert_eq!(back, panel);
        let sub = read_panel_csv(&p, Some((1900, 1949))).unwrap();
        assert_eq!(sub[0].len(), 50);
        assert!(read_panel_csv(&p, Some((1890, 1949))).is_err());
    }
}
