//! The Smooth step: Gibbs sampling of the Gaussian-Gaussian pseudo-model
//!
//! ```text
//! η̂ | η      ~ N(η, Σ_η̂)
//! η | γ, Σ   ~ MICAR(Xγ, (D − W) ⊗ Σ⁻¹)
//! γ          ~ N(0, σ²_γ I),   Σ ~ IW(ν, Ψ)
//! ```
//!
//! with exact full-conditional draws for η, γ and Σ.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extremes::{N_PARAMS, PARAM_NAMES};
use crate::lattice::{DesignMatrix, GridGraph, KroneckerPrecision, Mat7, COVARIATE_NAMES};
use crate::maxstep::MaxStepResult;
use crate::sparse::EnvelopeCholesky;

type Vec7 = SMatrix<f64, N_PARAMS, 1>;

/// Number of stored entries of a symmetric 7×7 matrix (upper triangle).
pub const N_SIGMA: usize = N_PARAMS * (N_PARAMS + 1) / 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperpriors {
    /// Prior variance of each γ entry.
    pub sigma2_gamma: f64,
    /// Inverse-Wishart degrees of freedom.
    pub nu: f64,
    /// Inverse-Wishart scale `Ψ = psi_scale · I₇`.
    pub psi_scale: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Self { sigma2_gamma: 100.0 * 100.0, nu: 0.1, psi_scale: 0.1 }
    }
}

impl Hyperpriors {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_gamma > 0.0) || !self.sigma2_gamma.is_finite() {
            return Err(Error::Validation(format!("sigma2_gamma must be positive, got {}", self.sigma2_gamma)));
        }
        if !(self.nu > 0.0) {
            return Err(Error::Validation(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.psi_scale > 0.0) {
            return Err(Error::Validation(format!("Psi scale must be positive, got {}", self.psi_scale)));
        }
        Ok(())
    }

    pub fn psi(&self) -> Mat7 {
        Mat7::identity() * self.psi_scale
    }
}

/// MCMC schedule: total iterations, burn-in and thinning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { iters: 60_000, burnin: 10_000, thin: 5 }
    }
}

impl Schedule {
    pub fn new(iters: usize, burnin: usize, thin: usize) -> Result<Self> {
        let s = Self { iters, burnin, thin };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Validation("thinning interval must be at least 1".into()));
        }
        if self.iters <= self.burnin {
            return Err(Error::Validation(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iters, self.burnin
            )));
        }
        if (self.iters - self.burnin) % self.thin != 0 {
            return Err(Error::Validation(format!(
                "iters - burnin = {} is not a multiple of thin = {}",
                self.iters - self.burnin,
                self.thin
            )));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iters - self.burnin) / self.thin
    }

    /// Whether iteration `it` (1-based) is kept.
    pub fn keeps(&self, it: usize) -> bool {
        it > self.burnin && (it - self.burnin) % self.thin == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Row-major 7×7.
    pub sigma: [[f64; N_PARAMS]; N_PARAMS],
    pub chain: u64,
    pub iteration: usize,
}

impl ChainState {
    pub fn sigma_matrix(&self) -> Mat7 {
        Mat7::from_fn(|i, j| self.sigma[i][j])
    }

    pub fn set_sigma(&mut self, s: &Mat7) {
        for i in 0..N_PARAMS {
            for j in 0..N_PARAMS {
                self.sigma[i][j] = s[(i, j)];
            }
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.eta.iter().chain(&self.gamma).chain(self.sigma.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "chain {} produced a non-finite value at iteration {}",
                self.chain, self.iteration
            )));
        }
        Ok(())
    }
}

fn upper_pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..N_PARAMS).flat_map(|i| (i..N_PARAMS).map(move |j| (i, j)))
}

fn symmetrize(m: &Mat7) -> Mat7 {
    (m + m.transpose()) * 0.5
}

fn spd_inverse(m: &Mat7, what: &str) -> Result<Mat7> {
    let c = m.cholesky().ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&c.inverse()))
}

/// The pseudo-model: Max-step summaries, spatial structure and hyperpriors.
pub struct GibbsModel<'a> {
    pub graph: &'a GridGraph,
    pub design: &'a DesignMatrix,
    pub hyper: Hyperpriors,
    /// `Σ_η̂⁻¹` blocks, zero for cells without a usable fit.
    like_prec: Vec<Mat7>,
    /// `Σ_η̂⁻¹ η̂`
    like_rhs: Vec<f64>,
    /// η̂ with unusable cells imputed by the mean of usable ones.
    eta_hat: Vec<f64>,
    /// Max-step standard errors (zero for unusable cells).
    se: Vec<f64>,
    gram: DMatrix<f64>,
    /// Cell-level elimination order for the η factorization.
    cell_order: Vec<usize>,
    input_hash: String,
}

impl<'a> GibbsModel<'a> {
    pub fn new(max: &MaxStepResult, design: &'a DesignMatrix, graph: &'a GridGraph, hyper: Hyperpriors) -> Result<Self> {
        hyper.validate()?;
        let n = graph.len();
        if max.n_cells() != n || design.n_cells() != n {
            return Err(Error::Domain(format!(
                "Max-step result ({} cells), design ({} cells) and grid ({n} cells) disagree",
                max.n_cells(),
                design.n_cells()
            )));
        }
        for (c, id) in graph.cells.iter().zip(&max.cell_ids) {
            if &c.id != id {
                return Err(Error::Domain(format!("Max-step cell {id} is not aligned with grid cell {}", c.id)));
            }
        }
        let usable: Vec<bool> = max.status.iter().map(|s| s.usable()).collect();
        if !usable.iter().any(|&u| u) {
            return Err(Error::Domain("no cell has a usable Max-step fit".into()));
        }
        let mut fill = [0.0; N_PARAMS];
        let n_ok = usable.iter().filter(|&&u| u).count() as f64;
        for i in (0..n).filter(|&i| usable[i]) {
            for k in 0..N_PARAMS {
                fill[k] += max.eta_hat[N_PARAMS * i + k] / n_ok;
            }
        }
        let mut eta_hat = max.eta_hat.clone();
        let mut like_prec = Vec::with_capacity(n);
        let mut like_rhs = vec![0.0; N_PARAMS * n];
        let mut se = vec![0.0; N_PARAMS * n];
        for i in 0..n {
            if !usable[i] {
                eta_hat[N_PARAMS * i..N_PARAMS * (i + 1)].copy_from_slice(&fill);
                like_prec.push(Mat7::zeros());
                continue;
            }
            let p = symmetrize(&max.precision[i]);
            if p.cholesky().is_none() {
                return Err(Error::Numerical(format!("Hessian block of cell {} is not positive definite", max.cell_ids[i])));
            }
            let e = Vec7::from_column_slice(&eta_hat[N_PARAMS * i..N_PARAMS * (i + 1)]);
            let r = p * e;
            like_rhs[N_PARAMS * i..N_PARAMS * (i + 1)].copy_from_slice(r.as_slice());
            for k in 0..N_PARAMS {
                se[N_PARAMS * i + k] = max.covariance[i][(k, k)].max(0.0).sqrt();
            }
            like_prec.push(p);
        }

        let mut h = Sha256::new();
        for v in eta_hat.iter().chain(like_prec.iter().flat_map(|m| m.iter())) {
            h.update(v.to_le_bytes());
        }
        for (i, j) in graph.edges() {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
        }
        for v in design.tr_mul(&vec![1.0; N_PARAMS * n]) {
            h.update(v.to_le_bytes());
        }
        h.update(serde_json::to_vec(&hyper).unwrap_or_default());
        let input_hash = hex::encode(h.finalize());

        Ok(Self {
            graph,
            design,
            hyper,
            like_prec,
            like_rhs,
            eta_hat,
            se,
            gram: design.covariate_gram(graph),
            cell_order: graph.rcm_order(),
            input_hash,
        })
    }

    /// Replace the fill-reducing cell ordering (new position → cell).
    pub fn with_cell_order(mut self, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; self.graph.len()];
        if order.len() != seen.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Domain("cell order is not a permutation".into()));
        }
        self.cell_order = order;
        Ok(self)
    }

    pub fn n_cells(&self) -> usize {
        self.graph.len()
    }

    pub fn dim_gamma(&self) -> usize {
        N_PARAMS * self.design.q()
    }

    /// SHA-256 over η̂, the precision blocks, graph edges, design and hyperpriors.
    pub fn input_hash(&self) -> &str {
        &self.input_hash
    }

    /// Symbolic factorization of the η posterior precision.
    pub fn eta_factor(&self) -> Result<EnvelopeCholesky> {
        let n = self.n_cells();
        let perm: Vec<usize> = self.cell_order.iter().flat_map(|&c| (0..N_PARAMS).map(move |k| N_PARAMS * c + k)).collect();
        let mut pattern = Vec::new();
        for i in 0..n {
            for a in 0..N_PARAMS {
                for b in 0..=a {
                    pattern.push((N_PARAMS * i + a, N_PARAMS * i + b));
                }
            }
        }
        for (i, j) in self.graph.edges() {
            for a in 0..N_PARAMS {
                for b in 0..N_PARAMS {
                    pattern.push((N_PARAMS * j + a, N_PARAMS * i + b));
                }
            }
        }
        EnvelopeCholesky::new(N_PARAMS * n, perm, pattern)
    }

    /// Factor `Σ_η̂⁻¹ + (D − W) ⊗ Σ⁻¹` and return the conditional mean.
    pub fn eta_conditional(&self, state: &ChainState, factor: &mut EnvelopeCholesky) -> Result<Vec<f64>> {
        let sigma_inv = spd_inverse(&state.sigma_matrix(), "Sigma")?;
        let n = self.n_cells();
        let mut entries = Vec::with_capacity(n * 28 + self.graph.n_edges() * 49);
        for i in 0..n {
            let d = self.graph.degree(i) as f64;
            let p = &self.like_prec[i];
            for a in 0..N_PARAMS {
                for b in 0..=a {
                    entries.push((N_PARAMS * i + a, N_PARAMS * i + b, p[(a, b)] + d * sigma_inv[(a, b)]));
                }
            }
        }
        for (i, j) in self.graph.edges() {
            for a in 0..N_PARAMS {
                for b in 0..N_PARAMS {
                    entries.push((N_PARAMS * j + a, N_PARAMS * i + b, -sigma_inv[(a, b)]));
                }
            }
        }
        factor.factor(entries).map_err(|e| {
            Error::Numerical(format!("eta update, chain {} iteration {}: {e}", state.chain, state.iteration))
        })?;
        let prior_mean = self.design.mul(&state.gamma);
        let k = KroneckerPrecision::new(self.graph, sigma_inv).mul(&prior_mean)?;
        let rhs: Vec<f64> = self.like_rhs.iter().zip(&k).map(|(a, b)| a + b).collect();
        factor.solve(&rhs)
    }

    /// Draw η from its full conditional.
    pub fn update_eta(&self, state: &ChainState, factor: &mut EnvelopeCholesky, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mean = self.eta_conditional(state, factor)?;
        let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let dev = factor.sample_from_standard(&z)?;
        Ok(mean.iter().zip(&dev).map(|(m, d)| m + d).collect())
    }

    /// Conditional mean and precision of γ.
    pub fn gamma_conditional(&self, state: &ChainState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sigma_inv = spd_inverse(&state.sigma_matrix(), "Sigma")?;
        let s = DMatrix::from_fn(N_PARAMS, N_PARAMS, |i, j| sigma_inv[(i, j)]);
        let d = self.dim_gamma();
        let prec = s.kronecker(&self.gram) + DMatrix::identity(d, d) / self.hyper.sigma2_gamma;
        let k = KroneckerPrecision::new(self.graph, sigma_inv).mul(&state.eta)?;
        let b = DVector::from_vec(self.design.tr_mul(&k));
        let chol = prec
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("gamma precision not PD at iteration {}", state.iteration)))?;
        Ok((chol.solve(&b), prec))
    }

    pub fn update_gamma(&self, state: &ChainState, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let (mean, prec) = self.gamma_conditional(state)?;
        let l = prec.cholesky().expect("checked in gamma_conditional").l();
        let z = DVector::from_fn(mean.len(), |_, _| rng.sample(StandardNormal));
        let dev = l.transpose().solve_upper_triangular(&z).expect("non-singular factor");
        Ok((mean + dev).iter().copied().collect())
    }

    /// `(ν_post, Ψ_post)` of the inverse-Wishart full conditional of Σ.
    pub fn sigma_conditional(&self, state: &ChainState) -> Result<(f64, Mat7)> {
        let xg = self.design.mul(&state.gamma);
        let r: Vec<f64> = state.eta.iter().zip(&xg).map(|(a, b)| a - b).collect();
        let psi_post = symmetrize(&(KroneckerPrecision::residual_scatter(self.graph, &r) + self.hyper.psi()));
        let nu_post = self.hyper.nu + self.n_cells() as f64;
        if !(nu_post > (N_PARAMS + 1) as f64) {
            return Err(Error::Domain(format!(
                "posterior degrees of freedom {nu_post} do not exceed {}; the grid is too small",
                N_PARAMS + 1
            )));
        }
        Ok((nu_post, psi_post))
    }

    pub fn update_sigma(&self, state: &ChainState, rng: &mut impl Rng) -> Result<Mat7> {
        let (nu, psi) = self.sigma_conditional(state)?;
        sample_inverse_wishart(nu, &psi, rng)
            .map_err(|e| Error::Numerical(format!("Sigma update, chain {} iteration {}: {e}", state.chain, state.iteration)))
    }

    /// One Gibbs sweep in the order η, γ, Σ.
    pub fn sweep(&self, state: &mut ChainState, factor: &mut EnvelopeCholesky, rng: &mut impl Rng) -> Result<()> {
        state.iteration += 1;
        state.eta = self.update_eta(state, factor, rng)?;
        state.gamma = self.update_gamma(state, rng)?;
        let s = self.update_sigma(state, rng)?;
        state.set_sigma(&s);
        state.check_finite()
    }

    /// Chain 0 starts at η̂; later chains jitter η̂ by twice the Max-step
    /// standard errors. γ is a ridge fit of the start on X and Σ the
    /// cross-covariance of increments across edges.
    pub fn initial_state(&self, chain: u64, rng: &mut impl Rng) -> Result<ChainState> {
        let mut eta = self.eta_hat.clone();
        if chain > 0 {
            for (e, s) in eta.iter_mut().zip(&self.se) {
                let z: f64 = rng.sample(StandardNormal);
                *e += 2.0 * s * z;
            }
        }
        let q = self.design.q();
        let n = self.n_cells();
        let mut xtx = DMatrix::<f64>::identity(q, q) / self.hyper.sigma2_gamma;
        for i in 0..n {
            let x = self.design.covariate_row(i);
            for a in 0..q {
                for b in 0..q {
                    xtx[(a, b)] += x[a] * x[b];
                }
            }
        }
        let xtx = xtx.cholesky().ok_or_else(|| Error::Numerical("covariate cross-product is singular".into()))?;
        let xty = self.design.tr_mul(&eta);
        let mut gamma = vec![0.0; N_PARAMS * q];
        for k in 0..N_PARAMS {
            let sol = xtx.solve(&DVector::from_column_slice(&xty[k * q..(k + 1) * q]));
            gamma[k * q..(k + 1) * q].copy_from_slice(sol.as_slice());
        }
        let edges = self.graph.n_edges().max(1) as f64;
        let s = (KroneckerPrecision::residual_scatter(self.graph, &eta) + self.hyper.psi()) / edges;
        let mut st = ChainState { eta, gamma, sigma: [[0.0; N_PARAMS]; N_PARAMS], chain, iteration: 0 };
        st.set_sigma(&symmetrize(&s));
        Ok(st)
    }

    /// Run one chain from RNG stream `chain` of `seed`.
    pub fn run_chain(&self, schedule: &Schedule, seed: u64, chain: u64) -> std::result::Result<PosteriorDraws, ChainFailure> {
        let mut rng = chain_rng(seed, chain);
        let fail = |state: Option<ChainState>, error: Error| ChainFailure { state, error };
        schedule.validate().map_err(|e| fail(None, e))?;
        let mut state = self.initial_state(chain, &mut rng).map_err(|e| fail(None, e))?;
        let mut factor = self.eta_factor().map_err(|e| fail(None, e))?;
        let mut draws = PosteriorDraws::empty(self, *schedule, seed, chain);
        for it in 1..=schedule.iters {
            let before = state.clone();
            if let Err(e) = self.sweep(&mut state, &mut factor, &mut rng) {
                return Err(fail(Some(before), e));
            }
            if schedule.keeps(it) {
                draws.push(&state);
            }
        }
        Ok(draws)
    }
}

/// A chain that stopped early, with the last good state for inspection.
#[derive(Debug)]
pub struct ChainFailure {
    pub state: Option<ChainState>,
    pub error: Error,
}

/// RNG for chain `chain`: the root seed with the chain index as the
/// ChaCha stream number.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Bartlett draw of `Σ ~ IW(ν, Ψ)`: `Σ⁻¹ = L A Aᵀ Lᵀ` with `L Lᵀ = Ψ⁻¹`.
pub fn sample_inverse_wishart(nu: f64, psi: &Mat7, rng: &mut impl Rng) -> Result<Mat7> {
    if !(nu > (N_PARAMS - 1) as f64) {
        return Err(Error::Domain(format!("inverse-Wishart needs nu > {}, got {nu}", N_PARAMS - 1)));
    }
    let psi_inv = spd_inverse(psi, "inverse-Wishart scale")?;
    let l = psi_inv.cholesky().ok_or_else(|| Error::Numerical("inverse-Wishart scale is not PD".into()))?.l();
    let mut a = Mat7::zeros();
    for i in 0..N_PARAMS {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let w = la * la.transpose();
    spd_inverse(&symmetrize(&w), "Wishart draw")
}

#[derive(Debug, Clone)]
pub struct GibbsOptions {
    pub schedule: Schedule,
    pub n_chains: usize,
    pub seed: u64,
    /// Worker threads; chains beyond this run in turn.
    pub threads: usize,
    /// Where to write the last state of a failed chain.
    pub postmortem_dir: Option<PathBuf>,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        Self { schedule: Schedule::default(), n_chains: 4, seed: 2024, threads: 1, postmortem_dir: None }
    }
}

/// Run `n_chains` chains concurrently. Output is independent of `threads`.
pub fn run_gibbs(model: &GibbsModel<'_>, opts: &GibbsOptions) -> Result<Vec<PosteriorDraws>> {
    opts.schedule.validate()?;
    if opts.n_chains == 0 {
        return Err(Error::Validation("need at least one chain".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.clamp(1, opts.n_chains))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;
    let results: Vec<_> =
        pool.install(|| (0..opts.n_chains as u64).into_par_iter().map(|c| model.run_chain(&opts.schedule, opts.seed, c)).collect());
    let mut out = Vec::with_capacity(results.len());
    for (c, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => out.push(d),
            Err(f) => {
                if let (Some(dir), Some(state)) = (&opts.postmortem_dir, &f.state) {
                    let p = dir.join(format!("chain{c}_failed_state.json"));
                    let written = std::fs::create_dir_all(dir)
                        .map_err(|e| Error::io(dir, e))
                        .and_then(|_| serde_json::to_string(state).map_err(|e| Error::json(&p, e)))
                        .and_then(|s| std::fs::write(&p, s).map_err(|e| Error::io(&p, e)));
                    match written {
                        Ok(()) => log::error!("chain {c} failed; last state saved to {}", p.display()),
                        Err(e) => log::error!("chain {c} failed and its state could not be saved: {e}"),
                    }
                }
                return Err(f.error);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Draw storage
// ---------------------------------------------------------------------------

/// Thinned draws of one chain, stored draw-major in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub chain: u64,
    pub seed: u64,
    pub schedule: Schedule,
    pub cell_ids: Vec<String>,
    pub q: usize,
    pub input_hash: String,
    /// `n_draws × 7N`
    pub eta: Vec<f64>,
    /// `n_draws × 7q`
    pub gamma: Vec<f64>,
    /// `n_draws × 28`, upper triangle row by row.
    pub sigma: Vec<f64>,
}

impl PosteriorDraws {
    fn empty(model: &GibbsModel<'_>, schedule: Schedule, seed: u64, chain: u64) -> Self {
        let r = schedule.retained();
        Self {
            chain,
            seed,
            schedule,
            cell_ids: model.graph.cells.iter().map(|c| c.id.clone()).collect(),
            q: model.design.q(),
            input_hash: model.input_hash.clone(),
            eta: Vec::with_capacity(r * N_PARAMS * model.n_cells()),
            gamma: Vec::with_capacity(r * model.dim_gamma()),
            sigma: Vec::with_capacity(r * N_SIGMA),
        }
    }

    fn push(&mut self, s: &ChainState) {
        self.eta.extend_from_slice(&s.eta);
        self.gamma.extend_from_slice(&s.gamma);
        self.sigma.extend(upper_pairs().map(|(i, j)| s.sigma[i][j]));
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_draws(&self) -> usize {
        self.sigma.len() / N_SIGMA
    }

    pub fn eta_draw(&self, b: usize) -> &[f64] {
        let w = N_PARAMS * self.n_cells();
        &self.eta[b * w..(b + 1) * w]
    }

    /// Draws of slot `k` at cell `i`.
    pub fn eta_series(&self, cell: usize, k: usize) -> Vec<f64> {
        let w = N_PARAMS * self.n_cells();
        self.eta.iter().skip(N_PARAMS * cell + k).step_by(w).copied().collect()
    }

    pub fn gamma_series(&self, idx: usize) -> Vec<f64> {
        self.gamma.iter().skip(idx).step_by(N_PARAMS * self.q).copied().collect()
    }

    pub fn sigma_series(&self, i: usize, j: usize) -> Vec<f64> {
        let (i, j) = (i.min(j), i.max(j));
        let idx = upper_pairs().position(|p| p == (i, j)).expect("valid index");
        self.sigma.iter().skip(idx).step_by(N_SIGMA).copied().collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for id in &self.cell_ids {
            for p in PARAM_NAMES {
                names.push(format!("eta[{id}].{p}"));
            }
        }
        for p in PARAM_NAMES {
            for j in 0..self.q {
                let cov = COVARIATE_NAMES.get(j).map_or_else(|| format!("x{j}"), |s| s.to_string());
                names.push(format!("gamma.{p}.{cov}"));
            }
        }
        for (i, j) in upper_pairs() {
            names.push(format!("Sigma.{}.{}", PARAM_NAMES[i], PARAM_NAMES[j]));
        }
        names
    }

    pub fn n_columns(&self) -> usize {
        N_PARAMS * (self.n_cells() + self.q) + N_SIGMA
    }

    /// All draws of column `c` (in [`Self::column_names`] order).
    pub fn column(&self, c: usize) -> Vec<f64> {
        let ne = N_PARAMS * self.n_cells();
        let ng = N_PARAMS * self.q;
        if c < ne {
            self.eta.iter().skip(c).step_by(ne).copied().collect()
        } else if c < ne + ng {
            self.gamma_series(c - ne)
        } else {
            self.sigma.iter().skip(c - ne - ng).step_by(N_SIGMA).copied().collect()
        }
    }

    /// Write `{stem}.draws` (columnar f64) and `{stem}.json` (manifest).
    pub fn write(&self, dir: &Path, stem: &str, threads: usize) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{stem}.draws"));
        let n = self.n_draws();
        let cols = self.n_columns();
        let mut buf = Vec::with_capacity(24 + 8 * n * cols);
        buf.extend_from_slice(DRAWS_MAGIC);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(cols as u64).to_le_bytes());
        for c in 0..cols {
            for v in self.column(c) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        let manifest = DrawsManifest {
            format_version: 1,
            chain: self.chain,
            seed: self.seed,
            schedule: self.schedule,
            n_draws: n,
            q: self.q,
            cell_ids: self.cell_ids.clone(),
            columns: self.column_names(),
            input_hash: self.input_hash.clone(),
            data_sha256: hex::encode(Sha256::digest(&buf)),
            threads,
        };
        let mp = dir.join(format!("{stem}.json"));
        let s = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mp, e))?;
        std::fs::write(&mp, s + "\n").map_err(|e| Error::io(&mp, e))?;
        Ok(path)
    }

    /// Read a `.draws` file and its sibling manifest.
    pub fn read(path: &Path) -> Result<Self> {
        let mp = path.with_extension("json");
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: DrawsManifest = serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))?;
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 24 || &buf[..8] != DRAWS_MAGIC {
            return Err(Error::Ingestion(format!("{}: not a draws file", path.display())));
        }
        if hex::encode(Sha256::digest(&buf)) != m.data_sha256 {
            return Err(Error::Ingestion(format!("{}: content hash does not match its manifest", path.display())));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes")) as usize;
        let ne = N_PARAMS * m.cell_ids.len();
        let ng = N_PARAMS * m.q;
        if n != m.n_draws || cols != ne + ng + N_SIGMA || buf.len() != 24 + 8 * n * cols {
            return Err(Error::Ingestion(format!("{}: size does not match its manifest", path.display())));
        }
        let at = |c: usize, b: usize| {
            let o = 24 + 8 * (c * n + b);
            f64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"))
        };
        let mut d = Self {
            chain: m.chain,
            seed: m.seed,
            schedule: m.schedule,
            cell_ids: m.cell_ids,
            q: m.q,
            input_hash: m.input_hash,
            eta: Vec::with_capacity(n * ne),
            gamma: Vec::with_capacity(n * ng),
            sigma: Vec::with_capacity(n * N_SIGMA),
        };
        for b in 0..n {
            d.eta.extend((0..ne).map(|c| at(c, b)));
            d.gamma.extend((ne..ne + ng).map(|c| at(c, b)));
            d.sigma.extend((ne + ng..cols).map(|c| at(c, b)));
        }
        Ok(d)
    }

    /// One row per retained draw, one column per parameter.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header = vec!["draw".to_string()];
        header.extend(self.column_names());
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        let ne = N_PARAMS * self.n_cells();
        let ng = N_PARAMS * self.q;
        for b in 0..self.n_draws() {
            let mut rec = vec![b.to_string()];
            rec.extend(self.eta[b * ne..(b + 1) * ne].iter().map(|v| v.to_string()));
            rec.extend(self.gamma[b * ng..(b + 1) * ng].iter().map(|v| v.to_string()));
            rec.extend(self.sigma[b * N_SIGMA..(b + 1) * N_SIGMA].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

const DRAWS_MAGIC: &[u8; 8] = b"EXTDRAW1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawsManifest {
    pub format_version: u32,
    pub chain: u64,
    pub seed: u64,
    pub schedule: Schedule,
    pub n_draws: usize,
    pub q: usize,
    pub cell_ids: Vec<String>,
    pub columns: Vec<String>,
    pub input_hash: String,
    pub data_sha256: String,
    pub threads: usize,
}
