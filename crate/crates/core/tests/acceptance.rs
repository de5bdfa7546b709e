//! Acceptance suite: one PASS/FAIL line per criterion. Failures are reported
//! but only change the exit status when `EXTATTR_ACCEPTANCE_STRICT` is set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use extattr::causal::{CausalSummary, DrawField};
use extattr::cli::{run_pipeline, RunConfig};
use extattr::diagnostics::{chi_pair, effective_sample_size, gelman_rubin, geweke_z};
use extattr::extremes::{
    bhr_cdf, bhr_logpdf, gev_cdf, return_level, shape_to_psi, CellParams, GevParams, ShapeTransformConstants, TimeIndex,
};
use extattr::hotspot::{estimate_region, lower_quantile, test_statistic};
use extattr::lattice::{Adjacency, Cell, DesignMatrix, GridGraph, KroneckerPrecision, Mat7};
use extattr::maxstep::{
    cell_loglik, cell_loglik_grad, fit_cell, run_max, CellSeries, CellStatus, MaxOptions, MaxStepResult,
};
use extattr::simulate::{draw_latent_field, sample_bhr_pair, simulate_series, SimConfig, TruthManifest};
use extattr::smooth::{GibbsModel, Hyperpriors, Schedule};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

// ---------------------------------------------------------------------------

fn c1_transform_constants() -> Outcome {
    let k = ShapeTransformConstants::from_c(0.005);
    let ok = (k.b_psi - 0.34538).abs() <= 1e-5 && (k.a_psi + 1.96589).abs() <= 1e-5;
    check(ok, format!("b = {:.7}, a = {:.7}", k.b_psi, k.a_psi))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn c2_distribution_oracles() -> Outcome {
    let mut r = rng(2, 0);
    let mut worst_rt: f64 = 0.0;
    for _ in 0..1000 {
        let g = GevParams::new(r.random_range(-10.0..10.0), r.random_range(0.2..5.0), r.random_range(-0.45..0.45)).unwrap();
        let p: f64 = r.random_range(1e-4..0.9);
        let z = return_level(p, &g).unwrap();
        worst_rt = worst_rt.max((gev_cdf(z, &g).unwrap() - (1.0 - p)).abs());
    }

    let cell = |ls: f64| CellParams {
        alpha0: 30.0,
        alpha1: 0.3,
        beta0: 31.0,
        beta1: 0.8,
        sigma_star: 0.3,
        psi: -0.2,
        lambda_star: ls,
    };
    let t = 0.4;
    let (mut ind_err, mut com_err): (f64, f64) = (0.0, 0.0);
    for &(x, y) in &[(29.0, 30.5), (31.0, 33.0), (30.2, 29.9), (32.5, 31.0)] {
        let c = cell(-10.0);
        let ind = gev_cdf(x, &c.counterfactual(t)).unwrap() * gev_cdf(y, &c.factual(t)).unwrap();
        ind_err = ind_err.max((bhr_cdf(x, y, &c, t).unwrap() - ind).abs());
        let c = cell(10.0);
        let m = gev_cdf(x, &c.counterfactual(t)).unwrap().min(gev_cdf(y, &c.factual(t)).unwrap());
        com_err = com_err.max((bhr_cdf(x, y, &c, t).unwrap() - m).abs());
    }

    let mut worst_fd: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let c = CellParams {
            lambda_star: r.random_range(-1.5..1.5),
            psi: r.random_range(-0.4..0.3),
            sigma_star: r.random_range(-0.5..0.8),
            ..cell(0.0)
        };
        let t = r.random_range(-1.7..1.7);
        let (cf, f) = (c.counterfactual(t), c.factual(t));
        let x = return_level(r.random_range(0.05..0.95), &cf).unwrap();
        let y = return_level(r.random_range(0.05..0.95), &f).unwrap();
        let h = 1e-3 * c.sigma();
        let cdf = |a, b| bhr_cdf(a, b, &c, t).unwrap();
        let fd = (cdf(x + h, y + h) - cdf(x + h, y - h) - cdf(x - h, y + h) + cdf(x - h, y - h)) / (4.0 * h * h);
        let an = bhr_logpdf(x, y, &c, t).unwrap().exp();
        if fd > 1e-6 {
            worst_fd = worst_fd.max((an - fd).abs() / fd);
            n += 1;
        }
    }

    let mut worst_mass: f64 = 0.0;
    for &ls in &[-0.7, 0.5, 1.2] {
        let c = cell(ls);
        let (cf, f) = (c.counterfactual(0.0), c.factual(0.0));
        let to_x = |la: f64, p: &GevParams| p.mu + p.sigma * ((-p.xi * la).exp() - 1.0) / p.xi;
        let jac = |la: f64, p: &GevParams| p.sigma * (-p.xi * la).exp();
        let inner = |la: f64| {
            let x = to_x(la, &cf);
            simpson(|lb| bhr_logpdf(x, to_x(lb, &f), &c, 0.0).unwrap().exp() * jac(la, &cf) * jac(lb, &f), -14.0, 4.0, 400)
        };
        worst_mass = worst_mass.max((simpson(inner, -14.0, 4.0, 400) - 1.0).abs());
    }
    let ok = worst_rt <= 1e-9 && ind_err <= 1e-6 && com_err <= 1e-4 && worst_fd <= 1e-4 && worst_mass <= 1e-3;
    check(
        ok,
        format!(
            "round trip {worst_rt:.1e}, independence {ind_err:.1e}, comonotone {com_err:.1e}, density vs FD {worst_fd:.1e}, mass {worst_mass:.1e}"
        ),
    )
}

fn default_truth() -> CellParams {
    CellParams {
        alpha0: 30.0,
        alpha1: 0.2,
        beta0: 30.8,
        beta1: 0.6,
        sigma_star: 0.4,
        psi: shape_to_psi(-0.15).unwrap(),
        lambda_star: 0.5,
    }
}

fn synthetic_series(c: &CellParams, time: &TimeIndex, r: &mut ChaCha8Rng) -> CellSeries {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &t in &time.t_star {
        let (x, y) = sample_bhr_pair(c, t, r).unwrap();
        a.push(x);
        b.push(y);
    }
    CellSeries::new("cell", time.clone(), a, b).unwrap()
}

fn c3_gradient_and_hessian() -> Outcome {
    let p = default_truth();
    let time = TimeIndex::span(1850, 2014).unwrap();
    let mut r = rng(3, 0);
    let s = synthetic_series(&p, &time, &mut r);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 50 {
        let x: [f64; 7] = std::array::from_fn(|i| p.to_array()[i] + 0.1 * r.sample::<f64, _>(StandardNormal));
        let (f, g) = cell_loglik_grad(&x, &s);
        if !f.is_finite() {
            continue;
        }
        n += 1;
        for j in 0..7 {
            let h = 1e-6 * x[j].abs().max(1.0);
            let (mut up, mut dn) = (x, x);
            up[j] += h;
            dn[j] -= h;
            let fd = (cell_loglik(&CellParams::from_array(up), &s) - cell_loglik(&CellParams::from_array(dn), &s)) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }

    let cfg = SimConfig::default();
    let (truth, _) = draw_latent_field(&cfg).unwrap();
    let panel = simulate_series(&cfg, &truth).unwrap();
    let res = run_max(&panel, &MaxOptions::default(), 4).map_err(|e| e.to_string())?;
    let mut bad = 0;
    let mut accepted = 0;
    for (i, st) in res.status.iter().enumerate() {
        if !st.usable() {
            continue;
        }
        accepted += 1;
        let h = res.precision[i];
        let asym = (h - h.transpose()).abs().max();
        if asym > 1e-12 * h.abs().max() || h.cholesky().is_none() {
            bad += 1;
        }
    }
    check(
        worst <= 1e-5 && bad == 0 && accepted > 0,
        format!("gradient rel. error {worst:.1e} over 50 points; {accepted} accepted Hessian blocks, {bad} not symmetric PD"),
    )
}

fn fit_replicates(p: &CellParams, time: &TimeIndex, reps: u64, seed: u64) -> Vec<Option<([f64; 7], [f64; 7])>> {
    (0..reps)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(seed, k);
            let s = synthetic_series(p, time, &mut r);
            let fit = fit_cell(&s, None, &MaxOptions::default(), k).ok()?;
            fit.status.usable().then(|| (fit.params.to_array(), fit.standard_errors()))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c4_max_recovery() -> Outcome {
    let p = default_truth();
    let truth = p.to_array();
    let short = fit_replicates(&p, &TimeIndex::span(1850, 2014).unwrap(), 200, 41);
    let mut within = [0usize; 7];
    for (est, se) in short.iter().flatten() {
        for k in 0..7 {
            if (est[k] - truth[k]).abs() <= 4.0 * se[k] {
                within[k] += 1;
            }
        }
    }
    let frac: Vec<f64> = within.iter().map(|&w| w as f64 / 200.0).collect();
    let long = fit_replicates(&p, &TimeIndex::span(1, 1650).unwrap(), 20, 42);
    let ratio: Vec<f64> = (0..7)
        .map(|k| {
            let a = median(short.iter().flatten().map(|f| f.1[k]).collect());
            let b = median(long.iter().flatten().map(|f| f.1[k]).collect());
            a / b
        })
        .collect();
    let target = 10f64.sqrt();
    let ok = frac.iter().all(|&f| f >= 0.95) && ratio.iter().all(|r| (r / target - 1.0).abs() <= 0.2);
    check(
        ok,
        format!(
            "within 4 SE: {:?}; SE ratio T=165/T=1650: {:?} (target {target:.3} ± 20%)",
            frac.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>(),
            ratio.iter().map(|f| format!("{f:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn toy_max(graph: &GridGraph, r: &mut ChaCha8Rng) -> MaxStepResult {
    let n = graph.len();
    let mut eta_hat = Vec::new();
    let mut cov = Vec::new();
    let mut prec = Vec::new();
    for i in 0..n {
        for k in 0..7 {
            eta_hat.push(0.5 * k as f64 + 0.3 * i as f64 + r.sample::<f64, _>(StandardNormal));
        }
        let a = Mat7::from_fn(|_, _| 0.3 * r.sample::<f64, _>(StandardNormal));
        let c = a * a.transpose() + Mat7::identity() * 0.2;
        prec.push(c.try_inverse().unwrap());
        cov.push(c);
    }
    MaxStepResult {
        cell_ids: graph.cells.iter().map(|c| c.id.clone()).collect(),
        eta_hat,
        covariance: cov,
        precision: prec,
        status: vec![CellStatus::Converged; n],
        loglik: vec![0.0; n],
        messages: vec![None; n],
    }
}

struct Moments {
    n: f64,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { n: 0.0, sum: DVector::zeros(d), outer: DMatrix::zeros(d, d) }
    }
    fn push(&mut self, x: &[f64]) {
        let v = DVector::from_column_slice(x);
        self.n += 1.0;
        self.sum += &v;
        self.outer += &v * v.transpose();
    }
    fn mean(&self) -> DVector<f64> {
        &self.sum / self.n
    }
    fn cov(&self) -> DMatrix<f64> {
        let m = self.mean();
        (&self.outer / self.n - &m * m.transpose()) * (self.n / (self.n - 1.0))
    }
}

/// Worst |sample − exact| / MC-SE over means and covariance entries of a
/// Gaussian target.
fn gaussian_z(m: &Moments, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let (sm, sc) = (m.mean(), m.cov());
    let d = mean.len();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        worst = worst.max((sm[i] - mean[i]).abs() / (cov[(i, i)] / m.n).sqrt());
        for j in 0..=i {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / m.n).sqrt();
            worst = worst.max((sc[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    worst
}

fn c5_gibbs_conditionals() -> Outcome {
    let draws = 100_000;
    let cells: Vec<Cell> =
        (0..9).map(|i| Cell { id: format!("g{i}"), lon: (i % 3) as f64, lat: (i / 3) as f64 }).collect();
    let graph = GridGraph::build(cells, 1.0, Adjacency::Rook).unwrap();
    let design = DesignMatrix::from_rows(graph.cells.iter().map(|c| vec![1.0, c.lon - 1.0, c.lat - 1.0]).collect());
    let mut r = rng(5, 0);
    let max = toy_max(&graph, &mut r);
    let hyper = Hyperpriors { nu: 5.0, ..Hyperpriors::default() };
    let model = GibbsModel::new(&max, &design, &graph, hyper).map_err(|e| e.to_string())?;
    let mut state = model.initial_state(0, &mut r).map_err(|e| e.to_string())?;
    for v in state.gamma.iter_mut() {
        *v += 0.3 * r.sample::<f64, _>(StandardNormal);
    }
    let sigma = state.sigma_matrix();
    let sinv = sigma.try_inverse().unwrap();
    let k = KroneckerPrecision::new(&graph, sinv).to_dense();
    let x = design.to_dense();
    let n = graph.len();

    // η | γ, Σ
    let mut p_eta = k.clone();
    let mut rhs = &k * (&x * DVector::from_column_slice(&state.gamma));
    for i in 0..n {
        let e = DVector::from_column_slice(&max.eta_hat[7 * i..7 * i + 7]);
        let pe = max.precision[i] * nalgebra::SVector::<f64, 7>::from_column_slice(e.as_slice());
        for a in 0..7 {
            rhs[7 * i + a] += pe[a];
            for b in 0..7 {
                p_eta[(7 * i + a, 7 * i + b)] += max.precision[i][(a, b)];
            }
        }
    }
    let cov_eta = p_eta.clone().try_inverse().unwrap();
    let mean_eta = &cov_eta * rhs;
    let mut factor = model.eta_factor().map_err(|e| e.to_string())?;
    let mut m = Moments::new(7 * n);
    for _ in 0..draws {
        m.push(&model.update_eta(&state, &mut factor, &mut r).map_err(|e| e.to_string())?);
    }
    let z_eta = gaussian_z(&m, &mean_eta, &cov_eta);

    // γ | η, Σ
    let eta = DVector::from_column_slice(&state.eta);
    let p_g = x.transpose() * &k * &x + DMatrix::identity(x.ncols(), x.ncols()) / hyper.sigma2_gamma;
    let cov_g = p_g.clone().try_inverse().unwrap();
    let mean_g = &cov_g * (x.transpose() * &k * eta);
    let mut m = Moments::new(x.ncols());
    for _ in 0..draws {
        m.push(&model.update_gamma(&state, &mut r).map_err(|e| e.to_string())?);
    }
    let z_g = gaussian_z(&m, &mean_g, &cov_g);

    // Σ | η, γ: IW(ν + N, Ψ + R (D − W) Rᵀ)
    let xg = &x * DVector::from_column_slice(&state.gamma);
    let resid = DMatrix::from_fn(7, n, |a, i| state.eta[7 * i + a] - xg[7 * i + a]);
    let psi_post = resid.clone() * graph.laplacian_dense() * resid.transpose() + DMatrix::identity(7, 7) * hyper.psi_scale;
    let nu_post = hyper.nu + n as f64;
    let exact = &psi_post / (nu_post - 8.0);
    let mut sum = DMatrix::<f64>::zeros(7, 7);
    let mut sq = DMatrix::<f64>::zeros(7, 7);
    for _ in 0..draws {
        let s = model.update_sigma(&state, &mut r).map_err(|e| e.to_string())?;
        for a in 0..7 {
            for b in 0..7 {
                sum[(a, b)] += s[(a, b)];
                sq[(a, b)] += s[(a, b)].powi(2);
            }
        }
    }
    let nd = draws as f64;
    let mut z_s: f64 = 0.0;
    for a in 0..7 {
        for b in 0..7 {
            let mean = sum[(a, b)] / nd;
            let sd = (sq[(a, b)] / nd - mean * mean).max(0.0).sqrt();
            z_s = z_s.max((mean - exact[(a, b)]).abs() / (sd / nd.sqrt()));
        }
    }

    // one cell: η | · = N(η̂, Σ_η̂)
    let one = GridGraph::from_edges(vec![Cell { id: "solo".into(), lon: 0.0, lat: 0.0 }], &[]).unwrap();
    let d1 = DesignMatrix::from_rows(vec![vec![1.0]]);
    let mut m1 = toy_max(&one, &mut r);
    m1.cell_ids = vec!["solo".into()];
    let model1 = GibbsModel::new(&m1, &d1, &one, Hyperpriors::default()).map_err(|e| e.to_string())?;
    let st1 = model1.initial_state(0, &mut r).map_err(|e| e.to_string())?;
    let mut f1 = model1.eta_factor().map_err(|e| e.to_string())?;
    let exact_mean = model1.eta_conditional(&st1, &mut f1).map_err(|e| e.to_string())?;
    let mean_gap = exact_mean.iter().zip(&m1.eta_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut m = Moments::new(7);
    for _ in 0..draws {
        m.push(&model1.update_eta(&st1, &mut f1, &mut r).map_err(|e| e.to_string())?);
    }
    let cov1 = DMatrix::from_fn(7, 7, |a, b| m1.covariance[0][(a, b)]);
    let z1 = gaussian_z(&m, &DVector::from_column_slice(&m1.eta_hat), &cov1);

    let ok = z_eta < 4.0 && z_g < 4.0 && z_s < 4.0 && z1 < 4.0 && mean_gap < 1e-10;
    check(
        ok,
        format!(
            "max |z|: eta {z_eta:.2}, gamma {z_g:.2}, Sigma {z_s:.2}, single cell {z1:.2} (mean gap {mean_gap:.1e})"
        ),
    )
}

fn c6_schedule() -> Outcome {
    let s = Schedule::new(60_000, 10_000, 5).map_err(|e| e.to_string())?;
    let kept = (1..=s.iters).filter(|&it| s.keeps(it)).count();
    check(s.retained() == 10_000 && kept == 10_000, format!("{} retained, {kept} kept by the iteration filter", s.retained()))
}

fn recovery_config(out: &Path) -> RunConfig {
    RunConfig {
        output_dir: out.to_path_buf(),
        simulate: Some(SimConfig::default()),
        schedule: Schedule::new(12_000, 2_000, 2).unwrap(),
        threads: Some(4),
        ..RunConfig::default()
    }
}

fn c7_end_to_end(out: &Path) -> Outcome {
    let cfg = recovery_config(out);
    run_pipeline(&cfg, true).map_err(|e| e.to_string())?;
    let truth = TruthManifest::read(&cfg.layout().data().join("truth.json")).map_err(|e| e.to_string())?;
    let sum = CausalSummary::read_csv(&cfg.layout().causal().join("delta_1850-2014.csv"), "delta").map_err(|e| e.to_string())?;
    let tru = truth.delta();
    let est = sum.means();
    if truth.cells.iter().zip(&sum.rows).any(|(a, b)| a.cell_id != b.cell_id) {
        return Err("cell order of summary and truth differ".into());
    }
    let n = tru.len() as f64;
    let (mt, me) = (tru.iter().sum::<f64>() / n, est.iter().sum::<f64>() / n);
    let cov: f64 = tru.iter().zip(&est).map(|(a, b)| (a - mt) * (b - me)).sum();
    let vt: f64 = tru.iter().map(|a| (a - mt).powi(2)).sum();
    let ve: f64 = est.iter().map(|b| (b - me).powi(2)).sum();
    let corr = cov / (vt * ve).sqrt();
    let covered = sum.rows.iter().zip(&tru).filter(|(r, t)| r.q05 <= **t && **t <= r.q95).count();
    let coverage = covered as f64 / n;
    check(
        corr > 0.9 && (0.80..=0.97).contains(&coverage),
        format!("correlation {corr:.3}, 90% interval coverage {covered}/{} = {coverage:.3}", tru.len()),
    )
}

fn c8_hotspot_calibration() -> Outcome {
    // hand-built toy against enumeration
    let cols = vec![vec![1.0, 2.0, -1.0, 0.2], vec![-1.0, 0.5, 1.0, 0.1]];
    let field = DrawField::from_columns(vec!["a".into(), "b".into()], &cols).unwrap();
    let t: Vec<f64> = cols.iter().map(|c| test_statistic(c, 0.0).unwrap().0).collect();
    let m: Vec<f64> = (0..4)
        .map(|b| {
            let e: Vec<f64> = (0..2).filter(|&g| cols[g][b] >= 0.0).map(|g| t[g]).collect();
            if e.is_empty() {
                0.0
            } else {
                e.into_iter().fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    let mut toy_ok = true;
    for alpha in [0.05, 0.25, 0.5, 0.75] {
        let c = lower_quantile(&m, alpha);
        let r = estimate_region(&field, 0.0, alpha).unwrap();
        toy_ok &= r.c_hat == c && r.in_region == vec![t[0] >= c, t[1] >= c];
    }

    // truth drawn from the same posterior the region is built from
    let (nx, ny, b) = (10, 6, 1000);
    let n = nx * ny;
    let alpha = 0.05;
    let hits: usize = (0..500u64)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng(8, rep);
            let centre: Vec<f64> = (0..n)
                .map(|g| 0.5 * ((g % nx) as f64 / nx as f64) + 0.3 * ((g / nx) as f64 / ny as f64) + 0.1 * r.sample::<f64, _>(StandardNormal))
                .collect();
            let draw = |r: &mut ChaCha8Rng| -> Vec<f64> {
                let shared: f64 = 0.08 * r.sample::<f64, _>(StandardNormal);
                let mut prev = 0.0;
                centre
                    .iter()
                    .map(|c| {
                        prev = 0.6 * prev + 0.8 * r.sample::<f64, _>(StandardNormal);
                        c + shared + 0.1 * prev
                    })
                    .collect()
            };
            let values: Vec<f64> = (0..b).flat_map(|_| draw(&mut r)).collect();
            let truth = draw(&mut r);
            let field = DrawField::new((0..n).map(|g| g.to_string()).collect(), values).unwrap();
            let res = estimate_region(&field, 0.35, alpha).unwrap();
            usize::from((0..n).all(|g| truth[g] < 0.35 || res.in_region[g]))
        })
        .sum();
    let freq = hits as f64 / 500.0;
    check(
        toy_ok && freq >= (1.0 - alpha) - 0.03,
        format!("toy enumeration {}, containment {hits}/500 = {freq:.3} (need ≥ {:.2})", if toy_ok { "exact" } else { "MISMATCH" }, 1.0 - alpha - 0.03),
    )
}

fn iid(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn c9_diagnostics() -> Outcome {
    let ok_geweke = (0..1000u64)
        .into_par_iter()
        .filter(|&k| geweke_z(&iid(10_000, &mut rng(9, k)), 0.1, 0.5).unwrap().abs() < 1.96)
        .count();
    let gfrac = ok_geweke as f64 / 1000.0;
    let mut r = rng(9, 5000);
    let chains: Vec<Vec<f64>> = (0..4).map(|_| iid(5000, &mut r)).collect();
    let rhat = gelman_rubin(&chains).unwrap();
    let n = 20_000;
    let mut v = r.sample::<f64, _>(StandardNormal) / (1.0f64 - 0.81).sqrt();
    let ar: Vec<f64> = (0..n)
        .map(|_| {
            let x = v;
            v = 0.9 * v + r.sample::<f64, _>(StandardNormal);
            x
        })
        .collect();
    let ess = effective_sample_size(&ar).unwrap();
    let ess_rel = ess / (n as f64 / 19.0);
    let chi = chi_pair(&iid(10_000, &mut r), &iid(10_000, &mut r), 0.95).unwrap();
    let ok = (gfrac - 0.95).abs() <= 0.02 && rhat < 1.01 && (ess_rel - 1.0).abs() <= 0.25 && (chi - 0.05).abs() <= 0.03;
    check(
        ok,
        format!("Geweke pass rate {gfrac:.3}, R-hat {rhat:.4}, ESS/(N/19) {ess_rel:.3}, chi(0.95) {chi:.3}"),
    )
}

fn files_under(root: &Path, sub: &[&str]) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for s in sub {
        if let Ok(rd) = std::fs::read_dir(root.join(s)) {
            for e in rd.flatten() {
                v.push(PathBuf::from(s).join(e.file_name()));
            }
        }
    }
    v.sort();
    v
}

fn c10_determinism(first: &Path, second: &Path) -> Outcome {
    run_pipeline(&recovery_config(second), true).map_err(|e| e.to_string())?;
    let dirs = ["data", "max", "draws", "causal", "hotspot", "diagnostics"];
    let a = files_under(first, &dirs);
    let b = files_under(second, &dirs);
    if a != b || a.is_empty() {
        return Err(format!("file sets differ: {} vs {}", a.len(), b.len()));
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|p| std::fs::read(first.join(p)).ok() != std::fs::read(second.join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    check(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", a.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let run_a = tmp.path().join("run-a");
    let run_b = tmp.path().join("run-b");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("transform constants", Box::new(c1_transform_constants)),
        ("distribution oracles", Box::new(c2_distribution_oracles)),
        ("max-step gradient and Hessian", Box::new(c3_gradient_and_hessian)),
        ("max-step recovery", Box::new(c4_max_recovery)),
        ("Gibbs conditional exactness", Box::new(c5_gibbs_conditionals)),
        ("schedule arithmetic", Box::new(c6_schedule)),
        ("end-to-end recovery", Box::new(|| c7_end_to_end(&run_a))),
        ("hotspot FWER calibration", Box::new(c8_hotspot_calibration)),
        ("diagnostics calibration", Box::new(c9_diagnostics)),
        ("determinism", Box::new(|| c10_determinism(&run_a, &run_b))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) && !(id == "10" && filter.contains(&"7".to_string())) {
            continue;
        }
        let t0 = Instant::now();
        let res = f();
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {id:>2} {name}: PASS  {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL  {d}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        if std::env::var_os("EXTATTR_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
